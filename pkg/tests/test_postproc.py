from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.ndimage import convolve

from cascade3d.postproc import (
    ThresholdPolicy,
    ensemble_average,
    grow_from,
    postprocess_case,
    region_grow_refine,
    threshold_labels,
    upsample_loc,
)
from cascade3d.volcore import DimensionMismatch, binarize, prob_map
from oracles import algorithm1, grow_bfs

# probabilities on a 1/64 grid are exact in float32, so oracle comparisons
# in float64 never land on a rounding boundary
GRID = 64


def _field(rng, shape, peak):
    """Blobby map with maximum ``peak`` quantised to the 1/64 grid."""
    raw = rng.random(shape)
    k = np.ones((3, 3, 3)) / 27
    raw = convolve(raw, k, mode="nearest")
    raw = (raw - raw.min()) / max(raw.max() - raw.min(), 1e-9)
    return np.floor(raw ** rng.uniform(1, 6) * peak * GRID) / GRID


def random_triple(rng, shape=(8, 8, 8)):
    whole = _field(rng, shape, rng.choice([0.3, 0.45, 0.9, 1.0]))
    mode = rng.integers(4)
    if mode == 0:      # nothing above 0.1
        tumor = _field(rng, shape, 0.09)
    elif mode == 1:    # nothing above T but something above 0.1
        tumor = _field(rng, shape, 0.45)
    elif mode == 2:    # a handful of confident voxels
        tumor = _field(rng, shape, 0.45)
        idx = rng.integers(0, 8, size=(rng.integers(1, 20), 3))
        tumor[tuple(idx.T)] = 0.75
    else:
        tumor = _field(rng, shape, 1.0)
    loc = np.floor(rng.random(shape) * 1.6 * GRID).clip(0, GRID - 1) / GRID
    loc[rng.random(shape) < 0.7] = 1 - 1 / GRID
    return whole, tumor, loc


def test_random_triples_match_transcription():
    rng = np.random.default_rng(2024)
    seen = Counter()
    for _ in range(500):
        w, t, l = random_triple(rng)
        branches = {}
        got = postprocess_case(prob_map(w), prob_map(t), prob_map(l), ThresholdPolicy(), branches)
        want, wb, tb = algorithm1(w, t, l)
        assert got.data.tobytes() == want.tobytes()
        assert (branches["whole"], branches["tumor"]) == (wb, tb)
        seen[wb] += 1
        seen[tb] += 1
    for b in ("empty", "refine", "still_empty", "small", "default"):
        assert seen[b] > 0, seen


def test_all_zero_maps_give_background():
    z = prob_map(np.zeros((4, 4, 4)))
    branches = {}
    out = postprocess_case(z, z, prob_map(np.ones((4, 4, 4))), branches=branches)
    assert not out.data.any()
    assert branches == {"whole": "empty", "tumor": "still_empty"}


def test_whole_fallback_to_low_threshold():
    w = np.zeros((4, 4, 4))
    w[1, 1, 1] = 0.2
    out = postprocess_case(prob_map(w), prob_map(np.zeros_like(w)), prob_map(np.ones_like(w)))
    # whole falls back to 0.1; the empty tumor then copies the whole mask
    assert out.data[1, 1, 1] == 2 and out.data.sum() == 2


def test_tumor_overrides_whole_and_loc_gates():
    w = np.full((4, 4, 4), 0.9)
    t = np.zeros((4, 4, 4))
    t[0] = 0.9
    loc = np.ones((4, 4, 4))
    loc[:, :, 0] = 0.0
    out = postprocess_case(prob_map(w), prob_map(t), prob_map(loc), ThresholdPolicy(small_cutoff=1)).data
    assert np.all(out[0, :, 1:] == 2) and np.all(out[1:, :, 1:] == 1) and not out[:, :, 0].any()


def test_small_tumor_uses_lower_grow_threshold():
    t = np.zeros((1, 1, 5))
    t[0, 0] = [0.6, 0.25, 0.25, 0.15, 0.0]
    one = np.ones_like(t)
    small = postprocess_case(prob_map(one), prob_map(t), prob_map(one), ThresholdPolicy(small_cutoff=100))
    big = postprocess_case(prob_map(one), prob_map(t), prob_map(one), ThresholdPolicy(small_cutoff=1))
    assert small.data.ravel().tolist() == [2, 2, 2, 1, 1]
    assert big.data.ravel().tolist() == [2, 1, 1, 1, 1]


def test_coarse_loc_is_upsampled():
    w = prob_map(np.full((4, 8, 8), 0.9))
    loc = np.zeros((2, 4, 4))
    loc[0, 0, 0] = 0.8
    out = postprocess_case(w, prob_map(np.zeros((4, 8, 8))), prob_map(loc))
    assert out.data[:2, :2, :2].all() and out.data.sum() == 8 * 2
    assert upsample_loc(prob_map(loc), (4, 8, 8)).shape == (4, 8, 8)


def test_mismatched_maps():
    with pytest.raises(DimensionMismatch):
        postprocess_case(prob_map(np.zeros((2, 2, 2))), prob_map(np.zeros((2, 2, 4))), prob_map(np.zeros((2, 2, 2))))


def test_threshold_labels_plain():
    w = prob_map(np.array([[[0.2, 0.6, 0.6]]]))
    t = prob_map(np.array([[[0.9, 0.1, 0.5]]]))
    assert threshold_labels(w, t).data.ravel().tolist() == [2, 1, 2]


def test_scaled_cutoff():
    assert ThresholdPolicy.scaled(256 * 256 * 128).small_cutoff == 100
    assert ThresholdPolicy.scaled(8 * 16 * 16).small_cutoff == 1
    assert ThresholdPolicy.scaled(128 * 128 * 64).small_cutoff == 13


def test_policy_validation():
    with pytest.raises(ValueError):
        ThresholdPolicy(tumor_default=0.6)
    with pytest.raises(ValueError):
        ThresholdPolicy(global_t=1.0)
    with pytest.raises(ValueError):
        ThresholdPolicy(small_cutoff=0)


# -- region growing ---------------------------------------------------------

probs = hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6),
                   elements=st.floats(0, 1, width=32))


@settings(max_examples=80, deadline=None)
@given(probs, st.floats(0.05, 0.45), st.floats(0.5, 0.95))
def test_refine_bracketed_by_thresholds(p, lo, hi):
    v = prob_map(p)
    out = region_grow_refine(v, hi, lo).data
    a, b = binarize(v, hi).data, binarize(v, lo).data
    assert not (a & ~out).any() and not (out & ~b).any()
    assert np.array_equal(out, grow_bfs(a, b))


@settings(max_examples=40, deadline=None)
@given(probs, st.floats(0.05, 0.9))
def test_refine_with_nearly_equal_thresholds_is_identity(p, t):
    v = prob_map(p)
    d = 1e-6
    out = region_grow_refine(v, t, t - d).data
    within = (p >= np.float32(t - d)) & (p < np.float32(t))
    if not within.any():
        assert np.array_equal(out, binarize(v, t).data)


def test_grow_from_idempotent_and_empty():
    rng = np.random.default_rng(0)
    seed = rng.random((5, 5, 5)) < 0.05
    cand = rng.random((5, 5, 5)) < 0.4
    once = grow_from(seed, cand)
    assert np.array_equal(grow_from(once, cand), once)
    assert np.array_equal(grow_from(seed, np.zeros_like(cand)), seed)


def test_refine_rejects_inverted_thresholds():
    with pytest.raises(ValueError):
        region_grow_refine(prob_map(np.zeros((2, 2, 2))), 0.3, 0.4)


# -- ensembling -------------------------------------------------------------

def _maps(rng, m, shape=(3, 4, 5)):
    return [prob_map(rng.random(shape)) for _ in range(m)]


def test_ensemble_single_map_identity():
    m = _maps(np.random.default_rng(0), 1)
    assert ensemble_average(m).data.tobytes() == m[0].data.tobytes()


def test_ensemble_matches_loop_mean():
    maps = _maps(np.random.default_rng(1), 5)
    out = ensemble_average(maps).data
    for idx in np.ndindex(out.shape):
        ref = sum(float(m.data[idx]) for m in maps) / 5
        assert abs(out[idx] - ref) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1), st.randoms())
def test_ensemble_permutation_invariant(m, seed, rnd):
    maps = _maps(np.random.default_rng(seed), m)
    shuffled = maps[:]
    rnd.shuffle(shuffled)
    assert ensemble_average(maps).data.tobytes() == ensemble_average(shuffled).data.tobytes()


def test_ensemble_errors():
    with pytest.raises(ValueError):
        ensemble_average([])
    with pytest.raises(DimensionMismatch):
        ensemble_average([prob_map(np.zeros((2, 2, 2))), prob_map(np.zeros((2, 2, 3)))])
