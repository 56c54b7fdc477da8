"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
import torch

from portrait_stylize import ccn, core, gem, inference, pipeline, toy, ttn
from portrait_stylize.ccn import GeneratorSpec
from portrait_stylize.evaluation import FeatureSetStats, frechet_distance, identity_similarity, stats_from_features
from portrait_stylize.facial import extract_expression_params, facial_perception_loss
from portrait_stylize.networks import StubFeatureExtractor
from portrait_stylize.providers import RandomConvEmbedding

from oracles import (directional_gradient_errors, perception_oracle, stub_features_oracle, total_oracle,
                     tv_oracle)

TOY_BUDGET_S = 15 * 60


def test_criterion_1_loss_oracles(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = {"tv": 0.0, "con": 0.0, "per": 0.0, "total": 0.0}
    extractor = StubFeatureExtractor(seed=2, width=4, depth=2)
    for _ in range(10):
        h, w = rng.integers(1, 9, size=2)
        img = rng.uniform(-1, 1, size=(3, h, w))
        worst["tv"] = max(worst["tv"], abs(ttn.tv_loss(torch.from_numpy(img)[None]).item() - tv_oracle(img)))

        a, b = rng.uniform(-1, 1, size=(2, 3, 8, 8))
        got = ttn.content_loss(torch.tensor(a[None], dtype=torch.float32),
                               torch.tensor(b[None], dtype=torch.float32), extractor).item()
        expected = np.abs(stub_features_oracle(extractor, a) - stub_features_oracle(extractor, b)).mean()
        worst["con"] = max(worst["con"], abs(got - expected))

        p, q = rng.uniform(0, 1, size=(2, 3))
        worst["per"] = max(worst["per"], abs(facial_perception_loss(p, q) - perception_oracle(p, q)))

        parts = dict(zip(("sty", "con", "per", "tv"), rng.uniform(0, 2, size=4)))
        weights = ttn.LossWeights(*rng.uniform(0, 300, size=3))
        expected = total_oracle(parts, weights.con, weights.per, weights.tv)
        worst["total"] = max(worst["total"], abs(ttn.total_loss(parts, weights) - expected))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 10
    criterion(1, ok, f"max abs error {max(worst.values()):.2e} (tol 1e-6), {elapsed:.2f}s (< 10s)")


def test_criterion_2_gradient_check(criterion):
    errors = directional_gradient_errors(probes=24)
    criterion(2, max(errors) < 1e-3,
              f"{len(errors)} probes, max relative error {max(errors):.2e} (< 1e-3)")


def test_criterion_3_blending_identities(criterion):
    spec = GeneratorSpec(n_layers=7, resolution=32, latent_dim=32, w_dim=16, channels=8)
    g_s, g_t = ccn.init_generator(spec, 0), ccn.init_generator(spec, 1)
    checks = {
        "k=0 is G_t": ccn.blend_generators(g_s, g_t, 0).equal(g_t),
        "k=L is G_s": ccn.blend_generators(g_s, g_t, 7).equal(g_s),
        "self-blend": all(ccn.blend_generators(g_s, g_s, k).equal(g_s) for k in range(8)),
        "distinct inputs": not g_s.equal(g_t),
    }
    failed = [name for name, ok in checks.items() if not ok]
    criterion(3, not failed, "L=7 toy generator, bit-exact" + (f"; failed: {failed}" if failed else ""))


def test_criterion_4_gem_ranges(criterion):
    config = gem.GemConfig()
    rng = config.stream()
    params = [gem.sample_geometry_params(config, rng) for _ in range(10_000)]
    scales = np.array([p.scale for p in params])
    rots = np.array([p.rotation for p in params])
    in_range = (scales.min() >= 0.8 and scales.max() <= 1.2
                and rots.min() >= -math.pi / 2 and rots.max() <= math.pi / 2)
    # standard error of a uniform mean is (b - a) / sqrt(12 n)
    z_scale = abs(scales.mean() - 1.0) / (0.4 / math.sqrt(12 * len(scales)))
    z_rot = abs(rots.mean()) / (math.pi / math.sqrt(12 * len(rots)))

    images = [np.random.default_rng(i).uniform(-1, 1, size=(32, 32, 3)).astype(np.float32) for i in range(8)]
    log = []
    expanded = gem.expand(images, config, config.stream(gem.SOURCE_STREAM), log)
    replay = all(np.array_equal(core.affine_transform(im, p), out) for im, p, out in zip(images, log, expanded))
    ok = in_range and z_scale < 3 and z_rot < 3 and replay
    criterion(4, ok, f"in range {in_range}, mean z-scores {z_scale:.2f}/{z_rot:.2f} (< 3), replay exact {replay}")


def test_criterion_5_expression_extraction(criterion):
    def box(x0, y0, w, h):
        return [[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]]

    eyes = {"left_eye": box(10, 10, 20, 5), "right_eye": box(40, 10, 20, 5)}
    closed = core.LandmarkSet({**eyes, "left_eye": [[10, 12], [15, 12], [25, 12], [30, 12]],
                               "mouth": box(20, 50, 40, 20)})
    half = core.LandmarkSet({**eyes, "mouth": box(20, 50, 40, 20)})
    wide = core.LandmarkSet({**eyes, "mouth": box(20, 40, 10, 30)})
    fixtures = (extract_expression_params(closed)[0] == 0.0
                and extract_expression_params(half, c_mouth=1.0)[2] == 0.5
                and extract_expression_params(wide, c_mouth=1.0)[2] == 1.0)

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        comps = {n: rng.uniform(0, 100, size=(6, 2)) for n in core.EXPRESSION_COMPONENTS}
        base = extract_expression_params(core.LandmarkSet(comps))
        scale, shift = rng.uniform(0.1, 10), rng.uniform(-500, 500, size=2)
        moved = extract_expression_params(core.LandmarkSet({k: v * scale + shift for k, v in comps.items()}))
        worst = max(worst, float(np.abs(moved - base).max()))
    criterion(5, fixtures and worst <= 1e-9, f"fixtures exact {fixtures}, invariance error {worst:.1e} (<= 1e-9)")


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    """Two independent full runs of the toy profile with the same seed."""
    data = tmp_path_factory.mktemp("toy")
    toy.write_toy_dataset(data, n_source=16, n_style=16, size=64, seed=0)
    runs = []
    for name in ("a", "b"):
        config = pipeline.toy_config(data, output_dir=data / f"run_{name}", seed=0)
        start = time.perf_counter()
        root = pipeline.run_full_training(config)
        runs.append((root, time.perf_counter() - start))
    return runs


def _finite_log(path):
    rows = pipeline.read_loss_log(path)
    return rows, all(math.isfinite(v) for row in rows for v in row.values())


def test_criterion_6_toy_end_to_end(criterion, toy_runs):
    root, elapsed = toy_runs[0]
    config = pipeline.load_config(root / "config.ini")
    ttn_rows, ttn_finite = _finite_log(root / "ttn" / "train_log.csv")
    ccn_rows, ccn_finite = _finite_log(root / "ccn" / "train_log.csv")
    _, facial_finite = _finite_log(root / "facial" / "train_log.csv")
    ratio = ttn_rows[-1]["con"] / ttn_rows[0]["con"]
    profile = (config.ccn.steps == 200 and config.ttn.steps == 500 and config.run.image_size == 64
               and len(ccn_rows) == 200 and len(ttn_rows) == 500)
    ok = profile and elapsed < TOY_BUDGET_S and ratio <= 0.5 and ttn_finite and ccn_finite and facial_finite
    criterion(6, ok, f"{elapsed:.0f}s (< {TOY_BUDGET_S}s), content loss final/step1 = {ratio:.3f} (<= 0.5), "
                     f"all finite {ttn_finite and ccn_finite and facial_finite}")


def test_criterion_7_metric_oracles(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        m1, m2 = rng.normal(size=2) * 3
        s1, s2 = rng.uniform(0.01, 5, size=2)
        got = frechet_distance(FeatureSetStats([m1], [[s1 ** 2]], 10), FeatureSetStats([m2], [[s2 ** 2]], 10))
        worst = max(worst, abs(got - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
    stats = stats_from_features(rng.normal(size=(64, 16)))
    self_fid = abs(frechet_distance(stats, stats))
    image = rng.uniform(-1, 1, size=(64, 64, 3)).astype(np.float32)
    id_self = identity_similarity(image, image, RandomConvEmbedding())
    ok = worst <= 1e-8 and self_fid < 1e-6 and abs(id_self - 1) <= 1e-6
    criterion(7, ok, f"1-D max error {worst:.1e} (<= 1e-8), self FID {self_fid:.1e} (< 1e-6), "
                     f"self ID {id_self:.8f}")


def test_criterion_8_reproducibility(criterion, toy_runs):
    (a, _), (b, _) = toy_runs
    logs = [f"{stage}/train_log.csv" for stage in ("ccn", "facial", "ttn")]
    same_logs = all((a / p).read_bytes() == (b / p).read_bytes() for p in logs)
    hash_a = pipeline.StageRecord.load(a / "ttn").info["translator_hash"]
    hash_b = pipeline.StageRecord.load(b / "ttn").info["translator_hash"]
    same_ccn = (pipeline.StageRecord.load(a / "ccn").info["target_hash"]
                == pipeline.StageRecord.load(b / "ccn").info["target_hash"])
    ok = same_logs and hash_a == hash_b and same_ccn
    criterion(8, ok, f"loss traces identical {same_logs}, translator hash {hash_a[:12]} vs {hash_b[:12]}, "
                     f"generator hash identical {same_ccn}")


def test_criterion_9_inference_contract(criterion, monkeypatch):
    translator = ttn.build_translator(ttn.TTNConfig(unet_base=8, unet_levels=3))
    small = np.random.default_rng(0).uniform(-1, 1, size=(256, 256, 3)).astype(np.float32)
    direct = ttn.translate(translator, small)

    calls = []
    original = ttn.translate

    def counting(net, image):
        calls.append(image.shape)
        return original(net, image)

    monkeypatch.setattr(ttn, "translate", counting)
    large = inference.infer_full_image(translator, np.zeros((2000, 3000, 3), np.float32))
    large_calls = list(calls)
    same_small = np.array_equal(inference.infer_full_image(translator, small), direct)
    import_names = set(vars(inference)) - {"__builtins__"}
    no_detector = not any("landmark" in n.lower() or "detect" in n.lower() or n == "facial"
                          for n in import_names)
    ok = (large.shape[:2] == (1365, 2048) and large_calls == [(1365, 2048, 3)]
          and same_small and no_detector)
    criterion(9, ok, f"3000x2000 -> {large.shape[1]}x{large.shape[0]} in {len(large_calls)} call(s), "
                     f"256x256 bit-identical {same_small}, no detector on path {no_detector}")
