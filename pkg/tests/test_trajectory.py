import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ris_control.trajectory import (EARTH_RADIUS_M, GpsPoint, PltParseError, PredictorConfig, PredictorModel,
                                    constant_velocity_track, feature_matrix, haversine_distance,
                                    inverse_projection, kinematic_features, load_geolife_dir, local_projection,
                                    make_windows, parse_plt, persistence_rollout, planar_trace, predict_rollout,
                                    read_plt, serialize_plt, split_trace, timestamp_from_fields, train_predictor)

FIXTURES = Path(__file__).resolve().parents[1] / "data" / "geolife"
HEADER = "Geolife trajectory\nWGS 84\nAltitude is in Feet\nReserved 3\n0,2,255,My Track,0,0,2,8421376\n0\n"
FIRST_ROW = "39.984702,116.318417,0,492,39744.1201851852,2008-10-23,02:53:04"

# reference values from scripts/derive_oracles.py
HAV_GEOLIFE_PAIR = 3.5168864278862102
HAV_LON_STEP = 851.99338856189385
HAV_BEIJING_SHANGHAI = 1067310.1709271293

coords = st.tuples(st.floats(-89, 89), st.floats(-179, 179))


def fixture_files():
    return sorted(FIXTURES.glob("*.plt"))


# --- parsing ------------------------------------------------------------------------------

def test_header_only_is_empty():
    assert parse_plt(HEADER) == []


def test_first_row_fields():
    (p,) = parse_plt(HEADER + FIRST_ROW + "\n")
    assert p.lat == 39.984702 and p.lon == 116.318417
    assert p.altitude_ft == 492


def test_fixture_starts_with_documented_row():
    assert fixture_files()[0].read_text().splitlines()[6] == FIRST_ROW


@pytest.mark.parametrize("text, match", [
    ("a\nb\n", "header"),
    (HEADER + "39.9,116.3,0,1,abc,2008-10-23,02:53:04\n", "row 0"),
    (HEADER + "39.9,116.3,0,1\n", "row 0"),
    (HEADER + FIRST_ROW + "\n" + FIRST_ROW + "\n", "row 1"),
])
def test_malformed_input(text, match):
    with pytest.raises(PltParseError, match=match):
        parse_plt(text)


@pytest.mark.parametrize("path", fixture_files()[:6], ids=lambda p: p.name)
def test_day_number_agrees_with_date_fields(path):
    rows = [line.split(",") for line in path.read_text().splitlines()[6:] if line.strip()]
    for row, p in zip(rows, read_plt(path)):
        assert abs(p.t - timestamp_from_fields(row[5], row[6])) <= 1.0


@pytest.mark.parametrize("path", fixture_files(), ids=lambda p: p.name)
def test_round_trip_preserves_fields(path):
    pts = read_plt(path)
    again = parse_plt(serialize_plt(pts))
    assert again == pts


def test_gps_point_range_check():
    with pytest.raises(ValueError):
        GpsPoint(91.0, 0.0, 0.0)


# --- geodesy ---------------------------------------------------------------------------------

def test_haversine_oracle_values():
    a, b = GpsPoint(39.984702, 116.318417, 0), GpsPoint(39.984683, 116.31845, 1)
    assert haversine_distance(a, b) == pytest.approx(HAV_GEOLIFE_PAIR, abs=1e-9)
    c, d = GpsPoint(39.9847, 116.3184, 0), GpsPoint(39.9847, 116.3284, 0)
    assert abs(haversine_distance(c, d) - HAV_LON_STEP) < 0.5
    e, f = GpsPoint(39.9042, 116.4074, 0), GpsPoint(31.2304, 121.4737, 0)
    assert haversine_distance(e, f) == pytest.approx(HAV_BEIJING_SHANGHAI, rel=1e-12)


@given(coords, coords)
def test_haversine_symmetric_and_zero(a, b):
    pa, pb = GpsPoint(a[0], a[1], 0), GpsPoint(b[0], b[1], 0)
    assert haversine_distance(pa, pb) == haversine_distance(pb, pa)
    assert haversine_distance(pa, pa) == 0.0
    assert haversine_distance(pa, pb) <= math.pi * EARTH_RADIUS_M + 1e-6


def test_projection_unit_examples():
    o = GpsPoint(39.98, 116.31, 0)
    np.testing.assert_array_equal(local_projection([o], o), [[0.0, 0.0]])
    north = GpsPoint(39.98 + math.degrees(1 / EARTH_RADIUS_M), 116.31, 0)
    np.testing.assert_allclose(local_projection([north], o), [[0.0, 1.0]], atol=1e-9)


def test_projection_matches_haversine_on_fixture():
    pts = read_plt(fixture_files()[0])
    xy = local_projection(pts, pts[0])
    # accumulate a stretch of roughly one kilometre
    steps = np.hypot(*np.diff(xy, axis=0).T)
    end = int(np.searchsorted(np.cumsum(steps), 1000.0)) + 1
    planar = np.hypot(*(xy[1:end + 1] - xy[0]).T)
    geo = np.array([haversine_distance(pts[0], p) for p in pts[1:end + 1]])
    mask = geo > 50
    assert mask.any()
    assert np.max(np.abs(planar[mask] - geo[mask]) / geo[mask]) < 1e-3


@given(st.lists(st.tuples(st.floats(-2000, 2000), st.floats(-2000, 2000)), min_size=1, max_size=10))
def test_inverse_projection_round_trip(xy):
    o = GpsPoint(39.98, 116.31, 0)
    xy = np.array(xy)
    lat, lon = inverse_projection(xy, o)
    back = local_projection([GpsPoint(a, b, 0) for a, b in zip(lat, lon)], o)
    np.testing.assert_allclose(back, xy, atol=1e-6)


def test_resampling_to_uniform_cadence():
    pts = read_plt(fixture_files()[1])
    tr = planar_trace(pts, step=1.0)
    assert len(tr) == int(math.floor(pts[-1].t - pts[0].t + 1e-9)) + 1
    np.testing.assert_array_equal(tr[0], [0.0, 0.0])


# --- kinematic features ------------------------------------------------------------------

def test_stationary_trace_has_zero_speed():
    feats = kinematic_features(np.zeros((5, 2)))
    assert all(f.speed == 0.0 for f in feats)


def test_axis_aligned_step():
    f = kinematic_features(np.array([[0.0, 0.0], [0.0, 5.0]]), 1.0)
    assert f[0].speed == 0.0 and f[0].heading == 0.0
    assert f[1].speed == 5.0 and f[1].heading == pytest.approx(math.pi / 2)


def test_heading_range_folds_negative_axis():
    f = kinematic_features(np.array([[0.0, 0.0], [-1.0, 0.0]]))
    assert f[1].heading == -math.pi


def test_features_match_direct_recomputation():
    tr = np.cumsum(np.random.default_rng(4).normal(size=(40, 2)), axis=0)
    feats = kinematic_features(tr, 2.0)
    for k in range(1, len(tr)):
        dx, dy = tr[k, 0] - tr[k - 1, 0], tr[k, 1] - tr[k - 1, 1]
        assert feats[k].speed == pytest.approx(math.sqrt(dx * dx + dy * dy) / 2.0, rel=1e-12)
        assert feats[k].heading == pytest.approx(math.atan2(dy, dx), abs=1e-12)


@given(st.floats(-math.pi, math.pi))
def test_heading_encoding_depends_only_on_direction(h):
    # headings only ever come from atan2 of a step, so no 2pi-shifted copy can reach the encoding
    tr = np.array([[0.0, 0.0], [math.cos(h), math.sin(h)]])
    m = feature_matrix(tr)
    np.testing.assert_allclose(m[1, 3:], [math.cos(h), math.sin(h)], atol=1e-12)
    assert np.array_equal(feature_matrix(4 * tr)[1, 3:], m[1, 3:])


def test_feature_errors():
    with pytest.raises(ValueError):
        kinematic_features(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        kinematic_features(np.zeros((3, 2)), 0.0)


# --- predictor -------------------------------------------------------------------------------

SMALL = PredictorConfig(window=5, hidden=16, epochs=30, batch_size=64, lr=1e-2)


def cv_tracks(n=120, seed=0, length=40):
    rng = np.random.default_rng(seed)
    return [constant_velocity_track(rng.uniform(-50, 50, 2), rng.uniform(-3, 3, 2), length) for _ in range(n)]


@pytest.fixture(scope="module")
def cv_model():
    return train_predictor(cv_tracks(), SMALL)


def test_constant_velocity_one_step(cv_model):
    track = constant_velocity_track([10.0, -4.0], [1.5, 2.0], 12)
    feats = feature_matrix(track[:6])[-5:]
    pred = cv_model.predict_next(feats[None])[0]
    assert np.linalg.norm(pred - track[6]) < 0.5


def test_constant_velocity_rollout(cv_model):
    for track in cv_tracks(n=10, seed=1, length=18):
        roll = predict_rollout(cv_model, track[:8], 10)
        assert roll.shape == (10, 2)
        assert np.max(np.linalg.norm(roll - track[8:], axis=1)) < 2.0


def test_rollout_horizon_one_equals_single_step(cv_model):
    track = constant_velocity_track([3.0, 3.0], [1.0, 0.0], 10)
    one = predict_rollout(cv_model, track, 1)[0]
    single = cv_model.predict_next(feature_matrix(track[-6:])[-5:][None])[0]
    np.testing.assert_array_equal(one, single)


def test_rollout_is_deterministic(cv_model):
    track = constant_velocity_track([0.0, 0.0], [1.0, 1.0], 10)
    assert np.array_equal(predict_rollout(cv_model, track, 5), predict_rollout(cv_model, track, 5))


def test_rollout_argument_checks(cv_model):
    with pytest.raises(ValueError):
        predict_rollout(cv_model, np.zeros((10, 2)), 0)
    with pytest.raises(ValueError):
        predict_rollout(cv_model, np.zeros((3, 2)), 1)


def test_training_loss_decreases(cv_model):
    assert cv_model.loss_history[-1] < cv_model.loss_history[0]


def test_repeated_point_is_learned():
    model = train_predictor([np.tile([7.0, -3.0], (20, 1))], PredictorConfig(hidden=8, epochs=5))
    pred = predict_rollout(model, np.tile([7.0, -3.0], (6, 1)), 1)[0]
    assert np.linalg.norm(pred - [7.0, -3.0]) < 0.1


def test_insufficient_data_names_shortest_trace():
    with pytest.raises(ValueError, match="trace 1"):
        train_predictor([np.zeros((20, 2)), np.zeros((4, 2))], SMALL)
    with pytest.raises(ValueError):
        train_predictor([], SMALL)


def test_window_must_allow_a_difference():
    with pytest.raises(ValueError):
        PredictorModel(PredictorConfig(window=1), np.random.default_rng(0))


@given(st.lists(st.floats(-1e4, 1e4), min_size=5, max_size=5))
def test_normalization_inverse(row):
    model = PredictorModel(PredictorConfig(hidden=4), np.random.default_rng(0))
    model.in_mean = np.array([0.0, 0.0, 1.3, -0.2, 0.1])
    model.in_scale = np.array([12.0, 12.0, 0.7, 0.5, 0.9])
    x = np.array(row)
    np.testing.assert_allclose(model.denormalize(model.normalize(x)), x, atol=1e-9)


def test_checkpoint_round_trip(cv_model, tmp_path):
    cv_model.save(tmp_path / "pred.ckpt")
    back = PredictorModel.load(tmp_path / "pred.ckpt")
    track = constant_velocity_track([0.0, 0.0], [1.0, -1.0], 10)
    assert np.array_equal(predict_rollout(back, track, 3), predict_rollout(cv_model, track, 3))


def test_windows_pair_features_with_next_point():
    tr = constant_velocity_track([0.0, 0.0], [1.0, 0.0], 9)
    X, Y = make_windows([tr], 5)
    assert X.shape == (4, 5, 5) and Y.shape == (4, 2)
    np.testing.assert_array_equal(Y[0], tr[5])
    np.testing.assert_array_equal(X[0, :, :2], tr[:5])


def test_persistence_and_split():
    h = np.arange(10.0).reshape(5, 2)
    np.testing.assert_array_equal(persistence_rollout(h, 3), np.tile([8.0, 9.0], (3, 1)))
    train, test = split_trace(np.arange(20.0).reshape(10, 2))
    assert len(train) == 8 and len(test) == 2
    assert train[-1, 0] < test[0, 0]


def test_fixture_directory_loads():
    traces = load_geolife_dir(FIXTURES)
    assert len(traces) == len(fixture_files())
    assert all(t.shape[1] == 2 and len(t) > 50 for t in traces)
