import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defectda.augment import (BIN_COUNT, CUTOUT_FILL, OPS, AugmentError, CTAugmentState, ct_update, cutout,
                              match_score, strong_augment, weak_augment)

REGISTRY = {"autocontrast", "brightness", "color", "contrast", "cutout", "equalize", "invert", "identity", "posterize",
            "rescale", "rotate", "sharpness", "shear_x", "shear_y", "smooth", "solarize", "translate_x", "translate_y"}


def image(seed=0, side=32):
    return np.random.default_rng(seed).random((side, side)).astype(np.float32)


def test_registry_contents():
    assert set(OPS) == REGISTRY
    assert set(CTAugmentState.uniform().weights) == REGISTRY


# --- weak ------------------------------------------------------------------------


def test_weak_no_mirror_is_identity():
    x = image()
    assert np.array_equal(weak_augment(x, np.random.default_rng(0), mirror_prob=0.0), x)


def test_weak_mirror_is_involution_and_keeps_histogram():
    x = image()
    once = weak_augment(x, np.random.default_rng(0), mirror_prob=1.0)
    assert np.array_equal(once, x[:, ::-1])
    assert np.array_equal(weak_augment(once, np.random.default_rng(0), mirror_prob=1.0), x)
    assert np.array_equal(np.sort(once.ravel()), np.sort(x.ravel()))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weak_is_original_or_mirror(seed):
    x = image(seed % 100)
    out = weak_augment(x, np.random.default_rng(seed))
    assert np.array_equal(out, x) or np.array_equal(out, x[:, ::-1])


# --- cutout ----------------------------------------------------------------------


def test_cutout_128_changes_at_most_one_sixteenth():
    x = np.zeros((128, 128), np.float32)
    out = cutout(x, np.random.default_rng(0))
    changed = out != x
    assert changed.sum() == 1024 == 128 * 128 // 16
    rows, cols = np.nonzero(changed)
    assert rows.max() - rows.min() == 31 and cols.max() - cols.min() == 31
    assert np.all(out[changed] == CUTOUT_FILL)


def test_cutout_never_crosses_boundary():
    rng = np.random.default_rng(1)
    x = np.zeros((32, 32), np.float32)
    for _ in range(1000):
        changed = cutout(x, rng) != x
        assert changed.sum() == 64  # the full square always lies inside the image


def test_cutout_on_gray_is_identity():
    x = np.full((32, 32), 0.5, np.float32)
    assert np.array_equal(cutout(x, np.random.default_rng(0)), x)


@pytest.mark.parametrize("side", [4, 30])
def test_cutout_rejects_bad_sides(side):
    with pytest.raises(AugmentError):
        cutout(np.zeros((side, side)), np.random.default_rng(0))


# --- strong ----------------------------------------------------------------------


def test_strong_identity_state_only_cutout_changes():
    state = CTAugmentState.uniform(ops=["identity"])
    x = image()
    out, applied = strong_augment(x, state, np.random.default_rng(0))
    assert [op for op, _ in applied] == ["identity", "identity", "cutout"]
    changed = out != x
    assert 0 < changed.sum() <= 64
    rows, cols = np.nonzero(changed)
    assert rows.max() - rows.min() < 8 and cols.max() - cols.min() < 8


def test_strong_applies_two_ops_then_cutout():
    state = CTAugmentState.uniform()
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, applied = strong_augment(image(), state, rng)
        assert len(applied) == 3
        assert applied[-1] == ("cutout", -1)
        assert all(op in REGISTRY and 0 <= b < BIN_COUNT for op, b in applied[:2])


def test_strong_rejects_empty_registry():
    with pytest.raises(AugmentError):
        strong_augment(image(), CTAugmentState({}), np.random.default_rng(0))


@pytest.mark.parametrize("m", np.linspace(0, 1, 17))
def test_rotate_is_180_or_nothing(m):
    x = image()
    out = OPS["rotate"](x, m, np.random.default_rng(0))
    assert np.array_equal(out, x) or np.array_equal(out, x[::-1, ::-1])
    assert not np.array_equal(out, np.rot90(x))


def test_strong_output_range_fuzz():
    state = CTAugmentState.uniform()
    rng = np.random.default_rng(2)
    for i in range(1000):
        out, _ = strong_augment(image(i % 20), state, rng)
        assert out.shape == (32, 32)
        assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("op", sorted(REGISTRY))
def test_each_op_preserves_shape_and_range(op):
    rng = np.random.default_rng(0)
    for m in (0.0, 0.5, 1.0):
        out = np.clip(OPS[op](image().astype(np.float64), m, rng), 0, 1)
        assert out.shape == (32, 32)
        assert np.isfinite(out).all()


def test_strong_deterministic_given_seed():
    state = CTAugmentState.uniform()
    a = strong_augment(image(), state.copy(), np.random.default_rng(5))
    b = strong_augment(image(), state.copy(), np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


# --- CTAugment state -------------------------------------------------------------


def test_ct_update_converges_monotonically():
    for score, limit in ((1.0, 1.0), (0.0, 0.0)):
        state = CTAugmentState.uniform()
        state.weights["brightness"][3] = 0.5
        values = []
        for _ in range(2000):
            ct_update(state, [("brightness", 3)], score)
            values.append(state.weights["brightness"][3])
        diffs = np.diff(values)
        assert np.all(diffs >= 0) if score == 1 else np.all(diffs <= 0)
        assert values[-1] == pytest.approx(limit, abs=1e-6)


def test_ct_update_rule_and_untouched_weights():
    state = CTAugmentState.uniform()
    before = state.copy()
    ct_update(state, [("contrast", 2), ("smooth", 7), ("cutout", -1)], 0.3)
    assert state.weights["contrast"][2] == pytest.approx(0.99 + 0.01 * 0.3)
    assert state.weights["smooth"][7] == pytest.approx(0.99 + 0.01 * 0.3)
    for op, w in state.weights.items():
        for i, v in enumerate(w):
            if (op, i) not in (("contrast", 2), ("smooth", 7)):
                assert v == before.weights[op][i]


@pytest.mark.parametrize("score", [-0.1, 1.1])
def test_ct_update_rejects_bad_score(score):
    with pytest.raises(AugmentError):
        ct_update(CTAugmentState.uniform(), [("identity", 0)], score)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(sorted(REGISTRY)), st.integers(0, BIN_COUNT - 1),
                          st.floats(0, 1)), max_size=50))
def test_ct_update_keeps_weights_in_unit_interval(updates):
    state = CTAugmentState.uniform()
    for op, b, score in updates:
        ct_update(state, [(op, b)], score)
    assert all(((w >= 0) & (w <= 1)).all() for w in state.weights.values())


def test_sampling_skips_bins_below_floor():
    state = CTAugmentState.uniform(ops=["brightness"])
    state.weights["brightness"][:] = 0.01
    state.weights["brightness"][4] = 0.9
    rng = np.random.default_rng(0)
    assert {state.sample_bin("brightness", rng) for _ in range(200)} == {4}


def test_sampling_falls_back_when_all_bins_below_floor():
    state = CTAugmentState.uniform(ops=["brightness"])
    state.weights["brightness"][:] = 0.01
    state.weights["brightness"][9] = 0.02
    assert state.sample_bin("brightness", np.random.default_rng(0)) == 9


def test_state_text_round_trip(tmp_path):
    state = CTAugmentState.uniform()
    ct_update(state, [("posterize", 1)], 0.123456789)
    path = tmp_path / "ct.csv"
    state.save(path)
    assert path.read_text().splitlines()[0] == "op,bin_index,weight"
    loaded = CTAugmentState.load(path)
    assert loaded.bin_count == state.bin_count
    for op in state.weights:
        assert np.array_equal(loaded.weights[op], state.weights[op])


def test_match_score():
    assert match_score(np.array([1.0, 0.0]), 0) == 1.0
    assert match_score(np.array([0.0, 1.0]), 0) == 0.0
    assert match_score(np.array([0.75, 0.25]), 0) == pytest.approx(0.75)
