import json
import math

import numpy as np
import pytest

from portrait_stylize import core, gem
from portrait_stylize.gem import GemConfig


def images(n=4, size=24, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, size=(size, size, 3)).astype(np.float32) for _ in range(n)]


def test_collapsed_ranges_are_identity():
    config = GemConfig(1.0, 1.0, 0.0, 0.0)
    batch = images()
    for before, after in zip(batch, gem.expand(batch, config)):
        assert np.array_equal(before, after)


def test_draws_stay_in_range():
    config = GemConfig()
    rng = config.stream()
    draws = [gem.sample_geometry_params(config, rng) for _ in range(10_000)]
    scales = np.array([p.scale for p in draws])
    rots = np.array([p.rotation for p in draws])
    assert scales.min() >= 0.8 and scales.max() <= 1.2
    assert rots.min() >= -math.pi / 2 and rots.max() <= math.pi / 2


def test_expand_is_deterministic():
    a = gem.expand(images(), GemConfig(seed=5))
    b = gem.expand(images(), GemConfig(seed=5))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_replay_from_log():
    log = []
    out = gem.expand(images(), GemConfig(seed=2), log=log)
    replay = [core.affine_transform(im, p) for im, p in zip(images(), log)]
    assert all(np.array_equal(x, y) for x, y in zip(out, replay))


def test_streams_are_independent():
    config = GemConfig(seed=0)
    a = [gem.sample_geometry_params(config, config.stream(gem.SOURCE_STREAM)) for _ in range(1)]
    b = [gem.sample_geometry_params(config, config.stream(gem.TARGET_STREAM)) for _ in range(1)]
    assert a != b


def test_empty_batch_rejected():
    with pytest.raises(core.ParameterError):
        gem.expand([], GemConfig())


def test_bad_ranges_rejected():
    with pytest.raises(core.ParameterError):
        GemConfig(scale_min=1.3, scale_max=1.2)
    with pytest.raises(core.ParameterError):
        GemConfig(scale_min=0.0, scale_max=1.2)


def test_materialize_writes_replayable_params(tmp_path):
    batch = images(3)
    gem.materialize(batch, ["a.png", "b.png", "c.png"], GemConfig(seed=1), tmp_path)
    records = [json.loads(line) for line in (tmp_path / "params.jsonl").read_text().splitlines()]
    assert [r["image"] for r in records] == ["a.png", "b.png", "c.png"]
    for image, rec, name in zip(batch, records, "abc"):
        expected = core.affine_transform(image, core.AffineParams(rec["scale"], rec["rotation"]))
        on_disk = core.load_image(tmp_path / f"{name}.png")
        np.testing.assert_allclose(on_disk, core.normalize(core.denormalize(expected)), atol=0)
