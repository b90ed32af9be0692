import numpy as np
import pytest

from uatrack.geometry import BBox
from uatrack.scenario import (DetectorModel, InputDataError, RawDetection, Scenario,
                              ScenarioSimulator, ScriptedObject, WorldObject,
                              grid_to_probability, read_detection_log, read_grid_log,
                              render_probability_map, render_raw_detections,
                              sample_detection_batch, sample_detection_set,
                              scenario_from_dict, step_world, to_occupancy_grid,
                              write_detection_log, write_grid_log)


def _obj(cx=100.0, cy=100.0, vx=0.0, vy=0.0, **kw):
    return WorldObject(id="a", box=BBox(cx, cy, 40, 30), velocity=(vx, vy), **kw)


def test_step_world_identity():
    rng = np.random.default_rng(0)
    objs = [_obj()]
    out = step_world(objs, 0.0, rng)
    assert out[0].box == objs[0].box


def test_step_world_linear_motion():
    rng = np.random.default_rng(0)
    objs = [_obj(vx=2.0)]
    for _ in range(3):
        objs = step_world(objs, 0.0, rng)
    assert objs[0].box.cx == pytest.approx(106.0)


def test_step_world_noise_moments():
    # increments of cx should have stddev ~= the configured noise
    rng = np.random.default_rng(42)
    deltas = []
    for _ in range(10_000):
        out = step_world([_obj()], 1.0, rng)
        deltas.append(out[0].box.cx - 100.0)
    assert np.std(deltas) == pytest.approx(1.0, rel=0.05)


def test_step_world_margin_removal():
    rng = np.random.default_rng(0)
    objs = [_obj(cx=990.0, vx=100.0)]
    out = step_world(objs, 0.0, rng, image_w=960, image_h=640, margin=50)
    assert out == []


def test_render_deterministic_single_object():
    rng = np.random.default_rng(0)
    model = DetectorModel(box_noise=0.0, clutter_rate=0.0)
    dets = render_raw_detections([_obj(c_bar=1.0, jitter=0.0)], model, rng, 960, 640)
    assert len(dets) == 1
    assert dets[0].confidence == 1.0
    assert dets[0].box == BBox(100, 100, 40, 30)


def test_render_clutter_poisson_moments():
    rng = np.random.default_rng(1)
    model = DetectorModel(clutter_rate=2.0)
    counts = [len(render_raw_detections([], model, rng, 960, 640))
              for _ in range(10_000)]
    # mean within 3 sigma of the rate
    tol = 3 * np.sqrt(2.0 / 10_000)
    assert abs(np.mean(counts) - 2.0) < tol


def test_render_ood_confidence_fluctuation():
    rng = np.random.default_rng(2)
    model = DetectorModel(box_noise=0.0, clutter_rate=0.0)
    obj = _obj(c_bar=0.7, jitter=0.01, ood=True)
    confs = [render_raw_detections([obj], model, rng, 960, 640)[0].confidence
             for _ in range(500)]
    assert np.mean(confs) == pytest.approx(0.7, abs=0.01)
    assert np.std(confs) == pytest.approx(0.01, rel=0.2)
    # the fluctuation regime straddles a 0.7 gate from frame to frame
    above = np.array(confs) >= 0.7
    assert above.any() and (~above).any()


def test_sample_detection_set_certain_cases():
    rng = np.random.default_rng(3)
    box = BBox(10, 10, 5, 5)
    always = [RawDetection(box=box, confidence=1.0)]
    never = [RawDetection(box=box, confidence=0.0)]
    for _ in range(50):
        assert len(sample_detection_set(always, rng).boxes) == 1
        assert len(sample_detection_set(never, rng).boxes) == 0


def test_sample_detection_set_bernoulli_frequency():
    rng = np.random.default_rng(4)
    raw = [RawDetection(box=BBox(10, 10, 5, 5), confidence=0.7)]
    m = 10_000
    hits = sum(len(sample_detection_set(raw, rng).boxes) for _ in range(m))
    tol = 3 * np.sqrt(0.7 * 0.3 / m)
    assert abs(hits / m - 0.7) < tol


def test_sample_detection_batch_matches_distribution():
    rng = np.random.default_rng(5)
    raw = [RawDetection(box=BBox(10, 10, 5, 5), confidence=0.4),
           RawDetection(box=BBox(50, 50, 5, 5), confidence=0.9)]
    samples = sample_detection_batch(raw, 10_000, rng)
    counts = np.array([len(s.boxes) for s in samples])
    assert np.mean(counts) == pytest.approx(1.3, abs=3 * np.sqrt(0.33 / 10_000) + 0.02)


def test_probability_map_levels():
    model = DetectorModel(p_noise=0.0, grid_cells=(24, 16))
    p = render_probability_map([], model, np.random.default_rng(0), 96, 64)
    assert np.all(p == 0.05)
    obj = WorldObject(id="x", box=BBox(48, 32, 24, 16))
    p = render_probability_map([obj], model, np.random.default_rng(0), 96, 64)
    assert p[8, 12] == 0.95  # cell centered inside the object
    ood = WorldObject(id="y", box=BBox(48, 32, 24, 16), ood=True)
    p = render_probability_map([ood], model, np.random.default_rng(0), 96, 64)
    assert p[8, 12] == 0.6


def test_to_occupancy_grid_transform():
    p = np.array([[1.0, 0.5, 0.2]])
    grid = to_occupancy_grid(p, cell_size=4.0)
    assert grid.occ.tolist() == [[1, 1, 0]]
    assert grid.unc[0, 0] == 0.0
    assert grid.unc[0, 1] == 1.0
    assert grid.unc[0, 2] == pytest.approx(0.4)


def test_to_occupancy_grid_validates():
    with pytest.raises(InputDataError):
        to_occupancy_grid(np.array([[1.2]]), 4.0)


def test_occupancy_round_trip():
    rng = np.random.default_rng(6)
    p = rng.uniform(0, 1, size=(20, 30))
    grid = to_occupancy_grid(p, 4.0)
    assert np.allclose(grid_to_probability(grid), p, atol=1e-12)
    assert grid.unc.min() >= 0 and grid.unc.max() <= 1
    assert np.array_equal(grid.occ == 1, p >= 0.5)


def test_simulator_bit_reproducible():
    sc = scenario_from_dict({
        "image": {"w": 960, "h": 640}, "frames": 5, "seed": 3,
        "objects": [{"id": "a", "start": [100, 100, 40, 30], "velocity": [2, 0],
                     "c_bar": 0.9}],
        "detector": {"clutter_rate": 1.0},
    })
    sim1 = ScenarioSimulator(sc, seed=7)
    sim2 = ScenarioSimulator(sc, seed=7)
    for k in range(5):
        d1 = sim1.raw_detections(k)
        d2 = sim2.raw_detections(k)
        assert d1 == d2
        assert np.array_equal(sim1.probability_map(k), sim2.probability_map(k))


def test_scenario_enter_exit():
    sc = scenario_from_dict({
        "image": {"w": 960, "h": 640}, "frames": 6, "seed": 0,
        "objects": [{"id": "late", "start": [100, 100, 40, 30], "enter": 2, "exit": 5}],
        "detector": {"clutter_rate": 0.0},
    })
    sim = ScenarioSimulator(sc, seed=0)
    assert [len(sim.truth(k)) for k in range(6)] == [0, 0, 1, 1, 1, 0]


def test_replay_logs_round_trip(tmp_path):
    dets = [[RawDetection(box=BBox(10, 20, 30, 40), confidence=0.5)], []]
    path = tmp_path / "dets.jsonl"
    write_detection_log(path, dets)
    back = read_detection_log(path)
    assert back == dets

    p_maps = [np.random.default_rng(0).uniform(0, 1, (4, 6)) for _ in range(3)]
    gpath = tmp_path / "grids.jsonl"
    write_grid_log(gpath, p_maps)
    back_maps = read_grid_log(gpath, cells_w=6, cells_h=4)
    for a, b in zip(back_maps, p_maps):
        assert np.allclose(a, b, atol=1e-6)  # float32 round trip


def test_replay_log_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"frame": 0, "detections": [{"box": [1,2,3], "conf": 0.5}]}\n')
    with pytest.raises(InputDataError):
        read_detection_log(path)
    gpath = tmp_path / "bad_grid.jsonl"
    gpath.write_text('{"frame": 0, "p_map": "AAAA"}\n')
    with pytest.raises(InputDataError):
        read_grid_log(gpath, 6, 4)
