import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lapsecount.simkit import (
    Background, CellState, CultureScene, ProliferationParams, SimConfig, advance_culture, default_configs,
    expected_population, generate_dataset, init_scene, read_pgm, render_frame, simulate, write_pgm,
)


def bare_scene(cells, f=0.0, size=(64, 64)):
    return CultureScene(cells=cells, clock=0.0, rng=np.random.default_rng(0), background=Background(),
                        frame_size=size, cycle_frequency=f, next_id=len(cells))


def mean_population(n0, f, t, seeds=200, dt=1.0):
    totals = []
    for seed in range(seeds):
        cfg = SimConfig(frame_size=(64, 64), duration=t, proliferation=ProliferationParams(n0, f),
                        seed=seed, debris_count=0)
        scene = init_scene(cfg)
        for _ in range(int(round(t / dt))):
            advance_culture(scene, dt)
        totals.append(len(scene))
    return float(np.mean(totals))


def test_expected_population_examples():
    assert expected_population(ProliferationParams(4, 1 / 12), 24) == 16.0
    assert expected_population(ProliferationParams(7, 0.3), 0) == 7.0
    assert expected_population(ProliferationParams(1, 0.0), 100) == 1.0
    with pytest.raises(ValueError):
        expected_population(ProliferationParams(1, 0.1), -1)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        ProliferationParams(-1, 0.1)
    with pytest.raises(ValueError):
        SimConfig(duration=0.5, sampling_interval=1.0)
    with pytest.raises(ValueError):
        SimConfig(sampling_interval=0)


def test_zero_frequency_keeps_count():
    scene = init_scene(SimConfig(frame_size=(64, 64), proliferation=ProliferationParams(5, 0.0), seed=3))
    for dt in (0.5, 3.0, 10.0):
        advance_culture(scene, dt)
    assert len(scene) == 5
    assert scene.clock == 13.5


def test_division_retires_parent_id():
    cell = CellState(0, (32.0, 32.0), 5.0, 0.99, 0.0)
    scene = advance_culture(bare_scene([cell], f=0.1), 1.0)
    ids = [c.id for c in scene.cells]
    assert len(ids) == 2 and 0 not in ids and len(set(ids)) == 2
    xs = sorted(c.center[0] for c in scene.cells)
    assert xs == [27.0, 37.0]  # offset +-radius along the orientation
    assert all(0 <= c.phase < 1 for c in scene.cells)


def test_population_cap_sets_saturated():
    cells = [CellState(i, (10.0 + i, 10.0), 4.0, 0.95, 0.0) for i in range(4)]
    scene = bare_scene(cells, f=0.2)
    scene.max_cells = 5
    advance_culture(scene, 1.0)
    assert len(scene) == 5
    assert scene.saturated


def test_advance_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        advance_culture(bare_scene([]), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.floats(0.0, 0.5))
def test_population_monotone_and_ids_unique(seed, n0, f):
    cfg = SimConfig(frame_size=(80, 60), proliferation=ProliferationParams(n0, f), seed=seed, debris_count=0)
    scene = init_scene(cfg)
    last = len(scene)
    for _ in range(10):
        advance_culture(scene, 1.0)
        assert len(scene) >= last
        last = len(scene)
        ids = [c.id for c in scene.cells]
        assert len(ids) == len(set(ids))
        for c in scene.cells:
            assert 0 <= c.center[0] <= 79 and 0 <= c.center[1] <= 59
            assert 0 <= c.phase < 1 and c.radius > 0


def test_monte_carlo_growth_matches_closed_form():
    # n0 = 8, f = 1/12, t = 24 -> 32
    mean = mean_population(8, 1 / 12, 24)
    assert abs(mean / 32.0 - 1.0) < 0.05


def test_empty_scene_renders_pure_gradient():
    cfg = SimConfig(frame_size=(40, 30), noise=0.0, debris_count=0, seed=1)
    scene = init_scene(SimConfig(frame_size=(40, 30), noise=0.0, debris_count=0, seed=1,
                                 proliferation=ProliferationParams(0, 0.1)))
    frame = render_frame(scene, cfg)
    bg = scene.background
    xs = np.arange(40) / 39 - 0.5
    ys = np.arange(30) / 29 - 0.5
    expected = bg.base + bg.gradient[0] * xs[None, :] + bg.gradient[1] * ys[:, None]
    assert np.allclose(frame.pixels, expected, atol=1e-15)
    assert frame.annotations == []


@pytest.mark.parametrize("center", [(32.0, 32.0), (20.3, 41.7)])
def test_single_cell_peak_at_dot(center):
    cfg = SimConfig(frame_size=(64, 64), noise=0.0, debris_count=0)
    scene = bare_scene([CellState(0, center, 5.0, 0.2, 0.7)])
    frame = render_frame(scene, cfg)
    y, x = np.unravel_index(np.argmax(frame.pixels), frame.pixels.shape)
    assert np.hypot(x - center[0], y - center[1]) <= 1.0
    assert frame.annotations == [center]


def test_morphology_changes_with_phase():
    cfg = SimConfig(frame_size=(64, 64), noise=0.0, debris_count=0)
    imgs = [render_frame(bare_scene([CellState(0, (32.0, 32.0), 5.0, p, 0.0)]), cfg).pixels
            for p in (0.2, 0.75, 0.95)]
    # elongation widens the blob along x; the pinched stage dims the centre
    assert imgs[1][32, 38] > imgs[0][32, 38]
    assert imgs[2][32, 32] < imgs[1][32, 32]


def test_render_is_pure_and_deterministic():
    cfg = SimConfig(frame_size=(64, 48), seed=4)
    scene = init_scene(cfg)
    a, b = render_frame(scene, cfg), render_frame(scene, cfg)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1
    frames1 = list(simulate(SimConfig(frame_size=(48, 48), duration=4, seed=9)))
    frames2 = list(simulate(SimConfig(frame_size=(48, 48), duration=4, seed=9)))
    assert all(np.array_equal(f.pixels, g.pixels) and f.annotations == g.annotations
               for f, g in zip(frames1, frames2))


def test_annotation_count_equals_cells():
    cfg = SimConfig(frame_size=(96, 96), duration=20, seed=2, proliferation=ProliferationParams(6, 0.1))
    scene = init_scene(cfg)
    for _ in range(20):
        advance_culture(scene, 1.0)
        frame = render_frame(scene, cfg)
        assert frame.count == len(scene)
        assert all(0 <= x < 96 and 0 <= y < 96 for x, y in frame.annotations)


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9)) / 255.0
    write_pgm(tmp_path / "a.pgm", img)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n9 7\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)


def test_generate_dataset_layout(tmp_path):
    cfgs = default_configs(3, seed=5, frame_size=(48, 40), duration=4)
    man = generate_dataset(cfgs, tmp_path)
    assert man.names == ["culture01", "culture02", "culture03"]
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert len(doc["cultures"]) == 3
    for c in doc["cultures"]:
        assert len(c["frames"]) == 5
        assert [fe["timestamp_h"] for fe in c["frames"]] == [0.0, 1.0, 2.0, 3.0, 4.0]
        side = json.loads((tmp_path / c["frames"][0]["annotation"]).read_text())
        assert set(side) == {"timestamp_h", "dots"}
    frames = man.load_frames("culture02")
    assert frames[0].pixels.shape == (40, 48)


def test_default_frame_count():
    assert SimConfig().n_frames == 41
    assert len(default_configs()) == 5


def test_regeneration_is_identical(tmp_path):
    cfgs = default_configs(2, seed=3, frame_size=(48, 48), duration=3)
    a = generate_dataset(cfgs, tmp_path / "a")
    b = generate_dataset(default_configs(2, seed=3, frame_size=(48, 48), duration=3), tmp_path / "b")
    for name in a.names:
        assert [f.count for f in a.load_frames(name)] == [f.count for f in b.load_frames(name)]
        for fa, fb in zip(a.culture(name).frames, b.culture(name).frames):
            assert (tmp_path / "a" / fa.image).read_bytes() == (tmp_path / "b" / fb.image).read_bytes()


def test_generate_dataset_preconditions(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(default_configs(1), tmp_path)
    cfgs = default_configs(2, frame_size=(48, 48), duration=2)
    cfgs[1].seed = cfgs[0].seed
    with pytest.raises(ValueError):
        generate_dataset(cfgs, tmp_path)


def test_generate_dataset_unwritable(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(OSError, match="blocker"):
        generate_dataset(default_configs(2, frame_size=(48, 48), duration=2), blocker / "ds")
