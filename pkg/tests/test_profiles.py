import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidar_intensity.calibration import CalibrationSettings
from lidar_intensity.errors import FileFormatError
from lidar_intensity.geometry import SpatialIndex
from lidar_intensity.profiles import (
    ClassProfile,
    ModeProximityClassifier,
    ProfileSet,
    build_profile,
    build_profiles,
    classify_point,
    classify_scan,
    neighborhood_mode_filter,
)
from lidar_intensity.scan import ClassId, Scan
from lidar_intensity.synthetic import PatchField, generate_patch_scan

from oracles import majority_filter_brute


def two_mode_set(grass=100.0, tree=500.0):
    def prof(c, m):
        return ClassProfile(c, np.array([m - 1, m + 1]), np.array([1]), m, 1000, 1.0)

    return ProfileSet((prof(ClassId.TREE, tree), prof(ClassId.GRASS, grass)))


def test_two_gaussian_classes_modes():
    rng = np.random.default_rng(0)
    a, b = rng.normal(100, 1, 5000), rng.normal(500, 1, 5000)
    ps = build_profiles(np.r_[a, b], np.r_[np.full(5000, 1), np.full(5000, 2)])
    # sample-median oracle on the generated data
    assert abs(ps[ClassId.GRASS].mode - np.median(a)) < 5
    assert abs(ps[ClassId.TREE].mode - np.median(b)) < 5
    assert abs(ps[ClassId.GRASS].mode - 100) < 5 and abs(ps[ClassId.TREE].mode - 500) < 5


def test_small_class_excluded(caplog):
    values = np.r_[np.ones(1000), np.ones(5) * 3]
    labels = np.r_[np.full(1000, 1), np.full(5, 4)]
    ps = build_profiles(values, labels)
    assert list(ps.class_ids) == [1]
    assert ps.excluded == {ClassId.PUDDLE: 5}
    assert "PUDDLE" in caplog.text


def test_void_ignored():
    ps = build_profiles(np.ones(2000), np.r_[np.zeros(1000), np.ones(1000)])
    assert list(ps.class_ids) == [1] and ps[ClassId.GRASS].support == 1000


def test_constant_class_mode():
    p = build_profile(np.full(1200, 42.0), ClassId.BUSH)
    assert p.mode == 42.0
    assert p.spread == 0.0


def test_histogram_binning():
    p = build_profile(np.linspace(0, 99, 1000), ClassId.GRASS)
    assert len(p.counts) == 100
    assert p.counts.sum() == 1000
    assert p.edges[0] <= p.mode <= p.edges[-1]


def test_mode_tie_goes_to_lower_bin():
    v = np.r_[np.zeros(10), np.full(10, 10.0)]
    p = build_profile(v, ClassId.GRASS)
    assert p.mode == pytest.approx(0.05)


def test_classify_examples():
    ps = two_mode_set()
    assert classify_point(100.0, ps) == ClassId.GRASS
    assert classify_point(500.0, ps) == ClassId.TREE
    assert classify_point(150.0, ps) == ClassId.GRASS
    assert classify_point(300.0, ps) == ClassId.GRASS


def test_midpoint_tie_lower_id():
    # tree (2) has the lower mode here, bush (3) the higher
    def prof(c, m):
        return ClassProfile(c, np.array([m - 1, m + 1]), np.array([1]), m, 1000, 1.0)

    ps = ProfileSet((prof(ClassId.BUSH, 10.0), prof(ClassId.TREE, 30.0)))
    assert classify_point(20.0, ps) == ClassId.TREE


modes = st.lists(st.floats(1, 1e6), min_size=2, max_size=5, unique=True)


@given(modes, st.floats(1e-3, 1e3), st.floats(0, 2e6))
def test_rescale_invariance_and_self_classification(ms, scale, v):
    def prof(c, m):
        return ClassProfile(ClassId(c), np.array([m - 1, m + 1]), np.array([1]), m, 1000, 1.0)

    ps = ProfileSet(tuple(prof(i + 1, m) for i, m in enumerate(ms)))
    scaled = ProfileSet(tuple(prof(i + 1, m * scale) for i, m in enumerate(ms)))
    for i, m in enumerate(ms):
        assert classify_point(m, ps) == i + 1
    d = np.abs(v - np.array(ms))
    if np.sort(d)[1] - np.sort(d)[0] > 1e-9 * max(1.0, v):
        assert classify_point(v, ps) == classify_point(v * scale, scaled)


@given(st.integers(0, 2**31))
def test_profile_build_order_independent(seed):
    rng = np.random.default_rng(seed)
    v = rng.gamma(3, 100, 3000)
    lab = rng.integers(1, 3, 3000)
    perm = rng.permutation(3000)
    a = build_profiles(v, lab, min_support=100)
    b = build_profiles(v[perm], lab[perm], min_support=100)
    assert a.to_json() == b.to_json()


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    ps = build_profiles(rng.gamma(2, 10, 3000), rng.integers(1, 4, 3000), settings={"r_min": 6.0})
    ps.save(tmp_path / "p.json")
    back = ProfileSet.load(tmp_path / "p.json")
    assert back.to_json() == ps.to_json()
    assert back.settings["r_min"] == 6.0
    with pytest.raises(FileFormatError):
        ProfileSet.from_json("{}")


def test_filter_uniform_unchanged():
    xyz = np.random.default_rng(0).uniform(0, 1, (100, 3))
    labels = np.full(100, 2, np.uint8)
    assert np.array_equal(neighborhood_mode_filter(labels, SpatialIndex(xyz), 0.3), labels)


def test_filter_restores_flipped_label():
    rng = np.random.default_rng(1)
    xyz = np.vstack([[0, 0, 0], rng.uniform(-0.1, 0.1, (10, 3))])
    labels = np.r_[3, np.full(10, 1)].astype(np.uint8)
    out = neighborhood_mode_filter(labels, SpatialIndex(xyz), 0.5)
    assert out[0] == 1


def test_filter_matches_brute_force():
    rng = np.random.default_rng(5)
    xyz = rng.uniform(0, 2, (150, 3))
    labels = rng.integers(0, 4, 150).astype(np.uint8)
    out = neighborhood_mode_filter(labels, SpatialIndex(xyz), 0.4)
    assert list(out) == majority_filter_brute(list(labels), xyz, 0.4)


@given(st.integers(0, 2**31))
def test_filter_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, 1, (60, 3))
    labels = rng.integers(0, 3, 60).astype(np.uint8)
    perm = rng.permutation(60)
    a = neighborhood_mode_filter(labels, SpatialIndex(xyz), 0.3)
    b = neighborhood_mode_filter(labels[perm], SpatialIndex(xyz[perm]), 0.3)
    assert np.array_equal(a[perm], b)


@given(st.integers(0, 2**31))
def test_filter_fixed_point_idempotent(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(0, 1, (50, 3))
    labels = rng.integers(0, 3, 50).astype(np.uint8)
    idx = SpatialIndex(xyz)
    once = neighborhood_mode_filter(labels, idx, 0.35)
    if np.array_equal(once, labels):
        assert np.array_equal(neighborhood_mode_filter(once, idx, 0.35), once)


def _two_class_scan(sigma=0.0, seed=0):
    fields = [
        PatchField(600, 20.0, ClassId.GRASS, sigma, alpha_range_deg=(0, 60)),
        PatchField(600, 200.0, ClassId.TREE, sigma, alpha_range_deg=(0, 60)),
    ]
    return generate_patch_scan(fields, seed=seed)


def test_classify_scan_separable_is_exact():
    scan, _ = _two_class_scan()
    ps = build_profiles(*_calibrated(scan))
    pred = classify_scan(scan, ps)
    scored = pred != ClassId.VOID
    assert scored.mean() > 0.9
    assert np.array_equal(pred[scored], scan.labels[scored])


def _calibrated(scan):
    from lidar_intensity.pipeline import calibrated_values

    return calibrated_values([scan])


def test_classify_scan_with_noise():
    train, _ = _two_class_scan(0.05, seed=1)
    test, _ = _two_class_scan(0.05, seed=2)
    ps = build_profiles(*_calibrated(train))
    pred = classify_scan(test, ps)
    scored = pred != ClassId.VOID
    assert (pred[scored] == test.labels[scored]).mean() >= 0.95


def test_classify_scan_near_range_all_void():
    rng = np.random.default_rng(0)
    xyz = rng.uniform(-3, 3, (500, 3))
    pred = classify_scan(Scan(xyz, np.ones(500)), two_mode_set())
    assert (pred == ClassId.VOID).all()


def test_classify_scan_with_filter():
    scan, _ = _two_class_scan(seed=3)
    ps = build_profiles(*_calibrated(scan))
    pred = classify_scan(scan, ps, CalibrationSettings(), filter_radius=0.15)
    assert pred.shape == (len(scan),)


def test_sklearn_classifier():
    rng = np.random.default_rng(0)
    X = np.r_[rng.normal(10, 1, 2000), rng.normal(50, 1, 2000)]
    y = np.r_[np.full(2000, 1), np.full(2000, 2)]
    clf = ModeProximityClassifier().fit(X, y)
    assert clf.score(X.reshape(-1, 1), y) > 0.99
    assert list(clf.classes_) == [1, 2]
    assert clf.get_params()["min_support"] == 1000
