"""Run configuration, dataset assembly and the staged calibrate -> expand -> translate flow.

A run directory holds one sub-directory per stage. Each finished stage
writes ``stage.json`` with a fingerprint of the configuration it consumed
and content hashes of its outputs; a rerun reuses a stage whose record
verifies, refuses to reuse one built from a different configuration, and
recomputes anything unfinished.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import shutil
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import ccn, facial, gem, ttn
from .core import ConfigError, DataError, list_images, load_image, read_landmarks, resize, save_image
from .inference import DEFAULT_MAX_SIDE, save_translator
from .networks import StubFeatureExtractor, VGGFeatureExtractor, weights_hash
from .providers import identity_provider

log = logging.getLogger(__name__)

STAGES = ("ccn", "facial", "ttn")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSettings:
    source_dir: str = ""
    style_dir: str = ""
    source_landmarks: str = ""
    output_dir: str = "runs/default"
    seed: int = 0
    image_size: int = 256
    skip_ccn: bool = False
    id_model: str = "stub-conv"
    content_extractor: str = "stub"
    max_side: int = DEFAULT_MAX_SIDE


@dataclass(frozen=True)
class EvalSettings:
    feature_extractor: str = "inception"
    id_model: str = "stub-conv"


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = RunSettings()
    ccn: ccn.CCNConfig = ccn.CCNConfig()
    gem: gem.GemConfig = gem.GemConfig()
    facial: facial.FacialConfig = facial.FacialConfig()
    ttn: ttn.TTNConfig = ttn.TTNConfig()
    eval: EvalSettings = EvalSettings()

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def fingerprint(self) -> str:
        return _digest({k: asdict(v) for k, v in self.sections().items()})

    def to_ini(self) -> str:
        lines = []
        for name, section in self.sections().items():
            lines.append(f"[{name}]")
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply ``{"section.key": "value"}`` overrides with schema checks."""
        raw: dict[str, dict[str, str]] = {}
        for dotted, value in overrides.items():
            if "." not in dotted:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            sec, key = dotted.split(".", 1)
            raw.setdefault(sec, {})[key] = value
        return _apply(self, raw)


def _coerce(section: str, key: str, ftype, text: str):
    text = text.strip()
    try:
        if ftype in (bool, "bool"):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if ftype in (int, "int"):
            return int(float(text)) if float(text).is_integer() else int(text)
        if ftype in (float, "float"):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} as {ftype}") from exc


def _apply(config: RunConfig, raw: dict[str, dict[str, str]]) -> RunConfig:
    sections = config.sections()
    updated = {}
    for sec, values in raw.items():
        if sec not in sections:
            raise ConfigError(f"unknown config section [{sec}]")
        current = sections[sec]
        fields = {f.name: f.type for f in dataclasses.fields(current)}
        changes = {}
        for key, text in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {sec}.{key}")
            changes[key] = _coerce(sec, key, fields[key], text)
        try:
            updated[sec] = dataclasses.replace(current, **changes)
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from exc
    return dataclasses.replace(config, **updated)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read an INI-style config (sections mirror module names) and apply overrides."""
    config = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = _apply(config, {s: dict(parser[s]) for s in parser.sections()})
    if overrides:
        config = config.with_overrides(overrides)
    return config


def toy_config(root: str | Path, output_dir: str | Path | None = None, seed: int = 0) -> RunConfig:
    """Desk-scale profile for the synthetic toy dataset written by :mod:`toy`."""
    root = Path(root)
    return RunConfig(
        run=RunSettings(source_dir=str(root / "source"), style_dir=str(root / "style"),
                        source_landmarks=str(root / "source_landmarks.jsonl"),
                        output_dir=str(output_dir or root / "run"), seed=seed, image_size=64),
        ccn=ccn.CCNConfig(steps=200, samples=48, batch=4, n_layers=5, resolution=64, channels=32,
                          disc_base=32, seed=seed),
        gem=gem.GemConfig(seed=seed),
        facial=facial.FacialConfig(steps=300, batch=8, seed=seed),
        ttn=ttn.TTNConfig(steps=500, batch=4, unet_base=16, disc_base=16, seed=seed),
        eval=EvalSettings(feature_extractor="stub-conv", id_model="stub-conv"),
    )


# --------------------------------------------------------------------------
# Hashing and stage records
# --------------------------------------------------------------------------

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _tree_hashes(root: Path, paths) -> dict[str, str]:
    return {str(Path(p).relative_to(root)): file_hash(p) for p in sorted(paths)}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageRecord:
    stage: str
    fingerprint: str
    outputs: dict[str, str]
    info: dict = field(default_factory=dict)

    def save(self, directory: Path) -> None:
        (directory / "stage.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: Path) -> "StageRecord | None":
        path = directory / "stage.json"
        if not path.exists():
            return None
        return cls(**json.loads(path.read_text()))

    def verify(self, directory: Path) -> bool:
        for rel, digest in self.outputs.items():
            p = directory / rel
            if not p.exists() or file_hash(p) != digest:
                return False
        return True

    @property
    def digest(self) -> str:
        return _digest({"fingerprint": self.fingerprint, "outputs": self.outputs})


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------

class ImageSet(Sequence):
    """Images loaded lazily from disk, resized to a square training size."""

    def __init__(self, paths, size: int, cache: bool = True):
        self.paths = [Path(p) for p in paths]
        self.size = size
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        image = resize(load_image(self.paths[i]), self.size, self.size)
        if self._cache is not None:
            self._cache[i] = image
        return image

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.paths]


@dataclass
class StyleAsset:
    name: str
    exemplars: list[Path]
    landmarks: str | None = None

    def __post_init__(self):
        if not self.exemplars:
            raise DataError(f"style asset {self.name!r} has no exemplars")
        for p in self.exemplars:
            if not Path(p).is_file():
                raise DataError(f"style exemplar not readable: {p}")

    @classmethod
    def from_dir(cls, directory: str | Path, landmarks: str | None = None) -> "StyleAsset":
        directory = Path(directory)
        if not directory.is_dir():
            raise DataError(f"style directory does not exist: {directory}")
        return cls(directory.name, list_images(directory), landmarks)


def build_datasets(source_dir, style_asset: StyleAsset, generated_dir=None, size: int = 256,
                   seed: int = 0, manifest_path=None):
    """Source photos and the shuffled union of real exemplars and generated samples.

    Returns ``(source_set, target_set, manifest)``; the manifest lists counts
    and per-file hashes in dataset order and is written to ``manifest_path``
    when given.
    """
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise DataError(f"source directory does not exist: {source_dir}")
    sources = list_images(source_dir)
    if not sources:
        raise DataError(f"source directory is empty: {source_dir}")
    generated = list_images(generated_dir) if generated_dir else []
    if not generated:
        log.warning("no generated target samples; target set holds the %d real exemplars only",
                    len(style_asset.exemplars))
    targets = list(style_asset.exemplars) + generated
    order = np.random.default_rng([seed, 3]).permutation(len(targets))
    targets = [targets[i] for i in order]

    manifest = {
        "source": {"count": len(sources), "files": [[p.name, file_hash(p)] for p in sources]},
        "target": {"count": len(targets), "real": len(style_asset.exemplars), "generated": len(generated),
                   "files": [[p.name, file_hash(p)] for p in targets]},
        "size": size,
        "seed": seed,
    }
    manifest["hash"] = _digest(manifest)
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(manifest, indent=1))
    return ImageSet(sources, size), ImageSet(targets, size), manifest


def content_extractor(name: str):
    if name == "stub":
        return StubFeatureExtractor()
    if name == "vgg19":
        return VGGFeatureExtractor()
    return VGGFeatureExtractor(weights_path=name)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

class Run:
    """A run directory with resumable, fingerprinted stages."""

    def __init__(self, config: RunConfig, output_dir: str | Path | None = None):
        self.config = config
        self.root = Path(output_dir or config.run.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.executed: list[str] = []

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def record(self, stage: str) -> StageRecord | None:
        return StageRecord.load(self.stage_dir(stage))

    def _reusable(self, stage: str, fingerprint: str) -> StageRecord | None:
        rec = self.record(stage)
        if rec is None:
            return None
        if rec.fingerprint != fingerprint:
            raise ConfigError(f"stage {stage!r} in {self.root} was built from a different configuration; "
                              "use a fresh output directory")
        if not rec.verify(self.stage_dir(stage)):
            log.warning("stage %s outputs fail hash verification; recomputing", stage)
            return None
        log.info("reusing stage %s (%s)", stage, fingerprint[:12])
        return rec

    def _run_stage(self, stage: str, fingerprint: str, body) -> StageRecord:
        rec = self._reusable(stage, fingerprint)
        if rec is not None:
            return rec
        directory = self.stage_dir(stage)
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True, exist_ok=True)
        log.info("running stage %s", stage)
        try:
            outputs, info = body(directory)
        except (ConfigError, DataError):
            raise
        except Exception as exc:
            raise StageError(stage, exc) from exc
        rec = StageRecord(stage, fingerprint, _tree_hashes(directory, outputs), info)
        rec.save(directory)
        self.executed.append(stage)
        return rec

    # -- stage 1 ----------------------------------------------------------
    def style_asset(self) -> StyleAsset:
        return StyleAsset.from_dir(self.config.run.style_dir)

    def ccn_fingerprint(self) -> str:
        asset = self.style_asset()
        return _digest({"ccn": asdict(self.config.ccn), "id_model": self.config.run.id_model,
                        "style": [file_hash(p) for p in asset.exemplars]})

    def calibrate(self) -> StageRecord:
        cfg = self.config.ccn
        asset = self.style_asset()

        def body(directory: Path):
            if cfg.source_checkpoint:
                source = ccn.LayeredGeneratorWeights.load(cfg.source_checkpoint)
            else:
                source = ccn.init_generator(cfg.spec, cfg.seed)
            exemplars = [load_image(p) for p in asset.exemplars]
            disc = ccn.init_discriminator(source.spec.resolution, cfg.seed + 1, cfg.disc_base)
            provider = identity_provider(self.config.run.id_model) if cfg.lambda_id > 0 else None
            result = ccn.finetune_target_generator(source, disc, exemplars, cfg, provider)
            blended = ccn.blend_generators(source, result.weights, cfg.k)
            source.save(directory / "generator_source")
            result.weights.save(directory / "generator_target")
            blended.save(directory / "generator_blend")
            _write_csv(directory / "train_log.csv", result.history)
            samples = ccn.generate_calibrated_targets(blended, cfg.samples, cfg.seed + 2)
            outputs = [p for p in directory.rglob("*") if p.is_file()]
            for i, image in enumerate(samples):
                path = directory / "samples" / f"gen_{i:05d}.png"
                save_image(image, path)
                outputs.append(path)
            info = {"steps": cfg.steps, "samples": len(samples),
                    "target_hash": _weights_digest(result.weights)}
            return outputs, info

        return self._run_stage("ccn", self.ccn_fingerprint(), body)

    # -- stage 2 ----------------------------------------------------------
    def facial_fingerprint(self) -> str:
        run = self.config.run
        return _digest({"facial": asdict(self.config.facial), "image_size": run.image_size,
                        "landmarks": file_hash(run.source_landmarks),
                        "sources": [file_hash(p) for p in list_images(run.source_dir)]})

    def source_alpha(self, names: Sequence[str]) -> np.ndarray:
        """Expression targets per source image; NaN rows where landmarks are missing."""
        cfg = self.config.facial
        records = read_landmarks(self.config.run.source_landmarks)
        alpha = np.full((len(names), cfg.n), np.nan)
        for i, name in enumerate(names):
            lm = records.get(name)
            if lm is None:
                continue
            try:
                alpha[i] = facial.extract_expression_params(lm, cfg.c_eye, cfg.c_mouth)
            except facial.ExtractionError as exc:
                log.warning("no expression target for %s: %s", name, exc)
        return alpha

    def train_regressor(self) -> StageRecord:
        run = self.config.run

        def body(directory: Path):
            images = ImageSet(list_images(run.source_dir), run.image_size)
            alpha = self.source_alpha(images.names)
            keep = ~np.isnan(alpha).any(axis=1)
            if not keep.any():
                raise DataError("no source image has usable landmarks for the expression regressor")
            model, report = facial.train_expression_regressor(
                [images[i] for i in np.flatnonzero(keep)], alpha[keep], self.config.facial)
            path = directory / "regressor.pt"
            torch.save({"state": model.state_dict(), "config": asdict(self.config.facial)}, path)
            _write_csv(directory / "train_log.csv",
                       [{"step": i + 1, "mse": v} for i, v in enumerate(report.train_mse)])
            return [path], {"val_mse_start": report.val_mse_start, "val_mse": report.val_mse}

        return self._run_stage("facial", self.facial_fingerprint(), body)

    def load_regressor(self) -> facial.ExpressionRegressor:
        payload = torch.load(self.stage_dir("facial") / "regressor.pt", map_location="cpu")
        model = facial.build_regressor(facial.FacialConfig(**payload["config"]))
        model.load_state_dict(payload["state"])
        model.eval().requires_grad_(False)
        return model

    # -- stage 3 ----------------------------------------------------------
    def train_translator(self, ccn_record: StageRecord | None, facial_record: StageRecord | None,
                         callback=None) -> StageRecord:
        run = self.config.run
        generated = self.stage_dir("ccn") / "samples" if ccn_record is not None else None
        asset = self.style_asset()
        manifest_path = self.root / "dataset_manifest.json"
        source_set, target_set, manifest = build_datasets(run.source_dir, asset, generated,
                                                          run.image_size, run.seed, manifest_path)
        fingerprint = _digest({
            "ttn": asdict(self.config.ttn), "gem": asdict(self.config.gem),
            "content_extractor": run.content_extractor, "dataset": manifest["hash"],
            "ccn": ccn_record.digest if ccn_record else "skipped",
            "facial": facial_record.digest if facial_record else "none",
        })

        def body(directory: Path):
            regressor = self.load_regressor() if facial_record is not None else None
            alpha = self.source_alpha(source_set.names) if regressor is not None else None
            result = ttn.train_ttn(source_set, target_set, regressor, content_extractor(run.content_extractor),
                                   self.config.ttn, self.config.gem, alpha, callback)
            ckpt = directory / "checkpoint.pt"
            digest = save_translator(ckpt, result.translator, result.discriminator,
                                     asdict(self.config.ttn), fingerprint)
            result.write_log(directory / "train_log.csv")
            info = {"translator_hash": digest,
                    "first": result.history[0], "last": result.history[-1]}
            return [ckpt, directory / "train_log.csv"], info

        return self._run_stage("ttn", fingerprint, body)


def _weights_digest(weights: ccn.LayeredGeneratorWeights) -> str:
    return _digest([weights_hash(layer) for layer in weights.layers])


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def lock_run(directory: str | Path) -> FileLock:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return FileLock(str(directory / ".lock"), timeout=0)


def run_full_training(config: RunConfig, stages: Sequence[str] = STAGES, callback=None) -> Path:
    """Run calibration, regressor training and translator training in order.

    Returns the run directory. Stages already completed with the same
    configuration are reused; ``config.run.skip_ccn`` drops calibration so
    the translator sees only the real exemplars.
    """
    run = Run(config)
    lock = lock_run(run.root)
    try:
        lock.acquire()
    except Timeout as exc:
        raise ConfigError(f"run directory {run.root} is locked by another process") from exc
    try:
        ccn_rec = None
        if not config.run.skip_ccn:
            if "ccn" in stages:
                ccn_rec = run.calibrate()
            else:
                ccn_rec = run._reusable("ccn", run.ccn_fingerprint())
        fac_rec = None
        if config.ttn.lambda_per > 0 and "facial" in stages:
            if not config.run.source_landmarks:
                raise ConfigError("ttn.lambda_per > 0 needs run.source_landmarks")
            fac_rec = run.train_regressor()
        if "ttn" not in stages:
            return run.root
        ttn_rec = run.train_translator(ccn_rec, fac_rec, callback)
        record = {
            "config_fingerprint": config.fingerprint(),
            "seed": config.run.seed,
            "stages": {s: r.fingerprint for s, r in (("ccn", ccn_rec), ("facial", fac_rec), ("ttn", ttn_rec)) if r},
            "executed": run.executed,
            "translator_hash": ttn_rec.info["translator_hash"],
        }
        (run.root / "run.json").write_text(json.dumps(record, indent=1))
        (run.root / "config.ini").write_text(config.to_ini())
        return run.root
    finally:
        lock.release()
