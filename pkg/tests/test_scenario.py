import json

import numpy as np
import pytest

from kinetic_kde import scenario
from kinetic_kde.kernel import kde_eval, make_kernel
from kinetic_kde.motion import MovingPoint, Segment
from kinetic_kde.persistence import CellComplex, maxima_persistence
from kinetic_kde.scenario import Scenario, ScenarioError


def test_single_static_point_at_center():
    sc = scenario.generate({"n": 1, "clusters": 1, "speed": 0.0, "D": 8.0, "T": 1.0, "seed": 3})
    assert sc.points[0].position(0.7) == (4.0, 4.0)


def test_same_seed_same_scenario():
    spec = {"n": 30, "clusters": 3, "speed": 0.4, "D": 10.0, "T": 1.0, "seed": 9}
    assert scenario.generate(spec) == scenario.generate(spec)
    assert scenario.generate(spec) != scenario.generate({**spec, "seed": 10})


@pytest.mark.parametrize("spec", [
    {"n": 10, "clusters": 1, "speed": 5.0, "D": 8.0, "T": 1.0, "seed": 0},
    {"n": 0, "clusters": 1, "speed": 0.0, "D": 8.0, "T": 1.0, "seed": 0},
    {"n": 5, "clusters": 6, "speed": 0.0, "D": 8.0, "T": 1.0, "seed": 0},
    {"n": 5, "clusters": 1, "speed": 0.0, "D": 1.5, "T": 1.0, "seed": 0},
])
def test_infeasible_specs_rejected(spec):
    with pytest.raises(ValueError):
        scenario.generate(spec)


def test_generated_points_stay_inside():
    sc = scenario.generate({"n": 60, "clusters": 4, "speed": 0.5, "D": 12.0, "T": 2.0, "seed": 1})
    for t in np.linspace(0, 2, 9):
        P = sc.positions(t)
        assert P.min() >= 1.0 and P.max() <= 11.0


def test_two_clusters_have_two_persistent_peaks():
    sc = scenario.reference_scenario()
    eps = 0.1  # the clusters' peaks have persistence near 0.26
    R = scenario.rasterize(sc, 0.0, 256)
    d = maxima_persistence(CellComplex.from_raster(R.heights))
    assert np.sum(d.persistence > 2 * eps) >= 2


def test_merge_scenario_meets_in_the_middle():
    sc = scenario.merge_scenario()
    left = [p for p in sc.points if p.position(0.0)[0] < 4]
    assert abs(np.mean([p.position(0.75)[0] for p in left]) - 4.0) < 0.2
    with pytest.raises(ValueError):
        scenario.merge_scenario(T=0.0)


def test_raster_values_and_bounds():
    sc = scenario.reference_scenario()
    R = scenario.rasterize(sc, 0.3, 64)
    X, Y = scenario.pixel_centers(sc.D, 64)
    assert np.array_equal(R.heights, kde_eval(sc.points, sc.kernel, 0.3, X, Y))
    assert R.heights[:4, :].max() == 0.0  # far field left of both clusters
    assert R.heights.max() <= sc.kernel.peak
    assert R.slack == pytest.approx(sc.kernel.lipschitz * np.sqrt(2) * sc.D / 64)
    assert R.center_of(65) == pytest.approx((1.5 * R.pixel, 1.5 * R.pixel))
    with pytest.raises(ValueError):
        scenario.rasterize(sc, 0.0, 1)


def test_raster_is_pure():
    sc = scenario.reference_scenario()
    a = scenario.rasterize(sc, 0.5, 128)
    b = scenario.rasterize(sc, 0.5, 128)
    assert np.array_equal(a.heights, b.heights)


def test_raster_lipschitz_estimate():
    sc = scenario.reference_scenario()
    R = scenario.rasterize(sc, 0.5, 256)
    h = R.pixel
    gx = np.abs(np.diff(R.heights, axis=0)).max() / h
    gy = np.abs(np.diff(R.heights, axis=1)).max() / h
    assert max(gx, gy) <= sc.kernel.lipschitz + R.slack


def test_json_round_trip():
    sc = scenario.reference_scenario()
    again = scenario.loads(scenario.dumps(sc))
    assert again == sc
    assert scenario.loads(scenario.dumps(again)) == sc
    bent = Scenario([MovingPoint(7, [Segment(0, 2, 2, 1, 0), Segment(0.5, 2.5, 2, 0, 1)])],
                    make_kernel("cone"), 8.0, 1.0)
    assert scenario.loads(scenario.dumps(bent)) == bent


def test_file_round_trip(tmp_path):
    sc = scenario.merge_scenario()
    scenario.save(sc, tmp_path / "s.json")
    assert scenario.load(tmp_path / "s.json") == sc


def test_sigma_scaling():
    doc = {"D": 16.0, "T": 1.0, "sigma": 2.0, "kernel": "gaussian",
           "points": [{"id": 0, "segments": [{"t": 0, "x": 8.0, "y": 6.0, "vx": 2.0, "vy": 0.0}]}]}
    sc = scenario.loads(json.dumps(doc))
    assert sc.D == 8.0 and sc.points[0].position(0.5) == (4.5, 3.0)
    assert sc.kernel.kind == "truncated-gaussian"
    assert scenario.to_dict(sc)["points"] == doc["points"]
    assert scenario.loads(json.dumps(doc), sigma=4.0).D == 4.0


def _doc_text(points):
    sc = Scenario([MovingPoint.linear(i, 3.0 + i * 0.1, 4.0) for i in range(points)], make_kernel("pyramid"),
                  8.0, 1.0)
    return scenario.dumps(sc)


def _break(text, old, new, count=1):
    assert old in text
    return text.replace(old, new, count)


def test_schema_errors_name_lines_and_ids():
    text = _doc_text(4)
    lines = text.splitlines()
    line_of_id2 = next(i for i, s in enumerate(lines, 1) if '"id": 2' in s)
    bad = _break(text, '"id": 2, "segments": [{"t": 0.0', '"id": 2, "segments": [{"t": 0.0, "x": 3.2, "y": 4.0, '
                 '"vx": 0.0, "vy": 0.0}, {"t": 0.0')
    with pytest.raises(ScenarioError, match=f"line {line_of_id2}: point 2"):
        scenario.loads(bad)
    with pytest.raises(ScenarioError, match="duplicate point id 1"):
        scenario.loads(_break(text, '"id": 2', '"id": 1'))
    with pytest.raises(ScenarioError, match="integer 'id'"):
        scenario.loads(_break(text, '"id": 3', '"id": "3"'))
    with pytest.raises(ScenarioError, match="numeric"):
        scenario.loads(_break(text, '"vx": 0.0', '"vx": "fast"'))
    with pytest.raises(ScenarioError, match="line 1: missing field 'T'"):
        scenario.loads(_break(text, '"T": 1.0', '"TT": 1.0'))
    with pytest.raises(ScenarioError, match="invalid JSON"):
        scenario.loads(text[:-5])
    with pytest.raises(ScenarioError, match="unknown kernel"):
        scenario.loads(_break(text, '"pyramid"', '"box"'))
    with pytest.raises(ScenarioError, match="starts after"):
        scenario.loads(_break(text, '"t": 0.0', '"t": 0.5'))
    with pytest.raises(ScenarioError, match="point 0"):
        scenario.loads(_break(text, '"x": 3.0', '"x": 9.0'))


def test_discontinuous_segments_name_the_point():
    doc = {"D": 8.0, "T": 1.0, "points": [
        {"id": 5, "segments": [{"t": 0, "x": 4, "y": 4, "vx": 1, "vy": 0}, {"t": 0.5, "x": 5, "y": 4, "vx": 0, "vy": 0}]}]}
    with pytest.raises(ScenarioError, match="point 5"):
        scenario.loads(json.dumps(doc))
