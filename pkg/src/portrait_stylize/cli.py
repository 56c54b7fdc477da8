"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import ccn, gem, pipeline, toy
from .core import ConfigError, DataError, ImageFormatError, ParameterError, ShapeError, list_images, load_image, save_image
from .evaluation import evaluate_run
from .inference import infer_files, load_translator
from .providers import ProviderError, feature_provider, identity_provider
from .ttn import NumericAbort

log = logging.getLogger("portrait_stylize")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def _config(args) -> pipeline.RunConfig:
    return pipeline.load_config(args.config, _overrides(args.set))


def cmd_make_toy(args) -> None:
    layout = toy.write_toy_dataset(args.root, args.n_source, args.n_style, args.size, args.seed)
    config = pipeline.toy_config(args.root, seed=args.seed)
    path = Path(args.root) / "toy.ini"
    path.write_text(config.to_ini())
    print(f"toy dataset: {layout['source']} / {layout['style']}\nconfig: {path}")


def cmd_calibrate(args) -> None:
    run = pipeline.Run(_config(args))
    rec = run.calibrate()
    print(f"ccn stage: {run.stage_dir('ccn')} ({rec.info.get('samples')} samples)")


def cmd_sample_pairs(args) -> None:
    config = _config(args)
    stage = pipeline.Run(config).stage_dir("ccn")
    source = ccn.LayeredGeneratorWeights.load(stage / "generator_source")
    blended = ccn.LayeredGeneratorWeights.load(stage / "generator_blend")
    z = ccn.sample_latents(args.count, args.seed, source.spec.latent_dim)
    out = Path(args.out)
    gs, gb = source.build(), blended.build()
    for i in range(args.count):
        xs, xt = ccn.sample_symmetric_pair(z[i].numpy(), gs, gb)
        save_image(xs, out / "source" / f"pair_{i:05d}.png")
        save_image(xt, out / "target" / f"pair_{i:05d}.png")
    print(f"wrote {args.count} pairs to {out}")


def cmd_expand(args) -> None:
    config = _config(args)
    paths = list_images(args.input)
    if not paths:
        raise DataError(f"no images in {args.input}")
    stream = gem.SOURCE_STREAM if args.stream == "source" else gem.TARGET_STREAM
    gem.materialize([load_image(p) for p in paths], [p.name for p in paths], config.gem, args.out, stream)
    print(f"expanded {len(paths)} images into {args.out}")


def cmd_train_ttn(args) -> None:
    config = _config(args)
    stages = ("facial", "ttn") if args.no_ccn_stage else pipeline.STAGES
    root = pipeline.run_full_training(config, stages)
    print(f"translator: {root / 'ttn' / 'checkpoint.pt'}")


def cmd_train(args) -> None:
    root = pipeline.run_full_training(_config(args))
    print(f"run directory: {root}")


def cmd_infer(args) -> None:
    translator = load_translator(args.checkpoint)
    outputs = infer_files(translator, args.inputs, args.out, args.max_side)
    for p in outputs:
        print(p)


def cmd_eval(args) -> None:
    report = evaluate_run(args.generated, args.style, args.source, feature_provider(args.features),
                          identity_provider(args.id_model))
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portrait-stylize", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        return p

    p = sub.add_parser("make-toy", help="write the synthetic toy dataset and its config")
    p.add_argument("root")
    p.add_argument("--n-source", type=int, default=16)
    p.add_argument("--n-style", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    with_config(sub.add_parser("calibrate", help="fine-tune, blend and sample the target generator")
                ).set_defaults(func=cmd_calibrate)

    p = with_config(sub.add_parser("sample-pairs", help="decode latent codes through source and blended generators"))
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_pairs)

    p = with_config(sub.add_parser("expand", help="write geometry-expanded copies of a directory"))
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stream", choices=("source", "target"), default="source")
    p.set_defaults(func=cmd_expand)

    p = with_config(sub.add_parser("train-ttn", help="train the expression regressor and translator"))
    p.add_argument("--no-ccn-stage", action="store_true", help="do not run calibration first")
    p.set_defaults(func=cmd_train_ttn)

    with_config(sub.add_parser("train", help="run every stage")).set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="stylize full images in one pass")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-side", type=int, default=2048)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="FID and identity similarity of a generated set")
    p.add_argument("--generated", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--features", default="inception")
    p.add_argument("--id-model", default="stub-conv")
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ProviderError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericAbort, FloatingPointError) as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ImageFormatError, ShapeError, ParameterError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except pipeline.StageError as exc:
        log.error("%s", exc)
        if isinstance(exc.cause, (NumericAbort, FloatingPointError)):
            return EXIT_NUMERIC
        if isinstance(exc.cause, (DataError, ImageFormatError, ShapeError, FileNotFoundError)):
            return EXIT_DATA
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
