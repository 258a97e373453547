"""End-to-end acceptance checks.

Each check records a single PASS/FAIL line, which the conftest hook prints in
the terminal summary.  Run on its own with::

    pytest tests/test_acceptance.py -v
"""

import time
from collections import Counter

import numpy as np
import pytest

from cascade3d.cli import main
from cascade3d.gradcheck import check_all_layers, check_cascade
from cascade3d.models import cascade_forward, make_bundle
from cascade3d.phantom import make_phantom_set
from cascade3d.postproc import ThresholdPolicy, ensemble_average, postprocess_case, threshold_labels
from cascade3d.preprocess import PatchGrid, extract_patches, normalize, stitch_patches
from cascade3d.trainer import Case, ScheduleState, TrainConfig, case_scores, dsc, soft_dice_loss, train
from cascade3d.volcore import prob_map
from conftest import ACCEPTANCE_LINES
from oracles import algorithm1, dsc_loop, mean_loop, soft_dice_loop
from test_postproc import random_triple

# desk-scale phantom geometry, array order (D, H, W)
SHAPE = (8, 16, 16)
NO_SCHEDULE = dict(plateau_patience=10 ** 6, stop_patience=10 ** 6)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def phantom_cases(n, seed):
    return [Case(i, normalize(img), lab) for i, img, lab in make_phantom_set(n, SHAPE, seed=seed)]


def desk_bundle(seed):
    return make_bundle(SHAPE, (4, 8, 8), (8, 8, 8), (4, 4, 4), depth=3, lnet_depth=2, base_channels=8, seed=seed)


def mean_region(scores, region):
    return float(np.mean([s[region][0] for s in scores]))


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    names = set()
    for seed in range(20):
        for r in check_all_layers(seed) + [check_cascade(seed, se=bool(seed % 2))]:
            assert r.checked > 0, r.name
            worst = max(worst, r.worst)
            names.add(r.name.split("[")[0])
    elapsed = time.perf_counter() - t0
    record(1, worst < 1e-4 and elapsed < 120,
           f"worst rel. error {worst:.2e} over 20 seeds, {len(names)} checks, {elapsed:.0f}s")


def test_criterion_2_dice_oracles():
    rng = np.random.default_rng(2)
    worst_loss = worst_dsc = 0.0
    exact = True
    for _ in range(100):
        u = rng.random((8, 8, 8))
        v = (rng.random((8, 8, 8)) < rng.random()).astype(float)
        worst_loss = max(worst_loss, abs(soft_dice_loss(u, v) - soft_dice_loop(u, v)))
        x = rng.random((8, 8, 8)) < rng.random()
        y = rng.random((8, 8, 8)) < rng.random()
        worst_dsc = max(worst_dsc, abs(dsc(x, y)[0] - dsc_loop(x, y)))
        exact &= dsc(x, y)[0] == dsc(y, x)[0] and dsc(x, x)[0] == 1.0
    record(2, worst_loss < 1e-6 and worst_dsc < 1e-6 and exact,
           f"soft dice {worst_loss:.1e}, dsc {worst_dsc:.1e}, symmetry/identity exact={exact}")


def test_criterion_3_postprocess_transcription():
    rng = np.random.default_rng(2024)
    whole_seen, tumor_seen = Counter(), Counter()
    identical = 0
    for _ in range(500):
        w, t, l = random_triple(rng)
        branches = {}
        got = postprocess_case(prob_map(w), prob_map(t), prob_map(l), ThresholdPolicy(), branches)
        want, wb, tb = algorithm1(w, t, l)
        identical += got.data.tobytes() == want.tobytes() and (branches["whole"], branches["tumor"]) == (wb, tb)
        whole_seen[wb] += 1
        tumor_seen[tb] += 1
    covered = [whole_seen["empty"], tumor_seen["empty"], tumor_seen["still_empty"],
               tumor_seen["small"], tumor_seen["default"]]
    record(3, identical == 500 and all(covered),
           f"{identical}/500 identical, whole {dict(whole_seen)}, tumor {dict(tumor_seen)}")


def test_criterion_4_ensemble():
    rng = np.random.default_rng(4)
    worst = 0.0
    invariant = True
    for m in range(1, 6):
        maps = [prob_map(rng.random((4, 5, 6))) for _ in range(m)]
        out = ensemble_average(maps).data
        worst = max(worst, float(np.abs(out - mean_loop([x.data for x in maps])).max()))
        for _ in range(3):
            perm = [maps[i] for i in rng.permutation(m)]
            invariant &= ensemble_average(perm).data.tobytes() == out.tobytes()
    single = prob_map(rng.random((4, 5, 6)))
    identity = ensemble_average([single]).data.tobytes() == single.data.tobytes()
    record(4, worst < 1e-6 and invariant and identity,
           f"loop mean {worst:.1e}, permutation invariant={invariant}, M=1 identity={identity}")


def test_criterion_5_patch_grid():
    grid = PatchGrid((256, 256, 256), (128, 128, 128), (96, 96, 96))
    per_axis = [len(set(o[a] for o in grid.origins)) for a in range(3)]
    constant = 0.37
    zeros = np.broadcast_to(np.float32(0), (256, 256, 256))
    patches = [(o, np.broadcast_to(np.float32(constant), p.shape)) for o, p in extract_patches(zeros, grid)]
    out = stitch_patches(patches, grid.shape).data
    exact = bool(np.all(out == np.float32(constant)))
    record(5, per_axis == [5, 5, 5] and len(patches) == 125 and exact,
           f"positions per axis {per_axis}, {len(patches)} patches, constant exact={exact}")


@pytest.mark.slow
def test_criterion_6_synthetic_overfit():
    t0 = time.perf_counter()
    cases = phantom_cases(20, seed=1)
    val = phantom_cases(2, seed=99)
    bundle = desk_bundle(0)
    train(bundle, cases, val, TrainConfig(epochs=150, lr=3e-4, seed=0, patches_per_case=2, **NO_SCHEDULE))
    policy = ThresholdPolicy.scaled(int(np.prod(SHAPE)))
    scores = [case_scores(postprocess_case(*cascade_forward(c.image, bundle), policy), c.label) for c in cases]
    whole, tumor = mean_region(scores, "kidney+tumor"), mean_region(scores, "tumor")
    elapsed = time.perf_counter() - t0
    record(6, whole >= 0.95 and tumor >= 0.80 and elapsed < 1800,
           f"train DSC whole {whole:.3f}, tumor {tumor:.3f}, {elapsed:.0f}s")


# same training recipe as criterion 6; shorter runs leave models too weak to compare
C7_CASES, C7_EPOCHS = 20, 150


@pytest.mark.slow
def test_criterion_7_ensemble_ordering():
    gaps = []
    for rep in range(3):
        train_cases = phantom_cases(C7_CASES, seed=100 + rep)
        val = phantom_cases(2, seed=200 + rep)
        test_cases = phantom_cases(6, seed=300 + rep)
        maps = []
        for s in range(2):
            b = desk_bundle(1000 * rep + s)
            train(b, train_cases, val, TrainConfig(epochs=C7_EPOCHS, lr=3e-4, seed=1000 * rep + s,
                                                   patches_per_case=2, **NO_SCHEDULE))
            maps.append({c.case_id: cascade_forward(c.image, b) for c in test_cases})
        policy = ThresholdPolicy.scaled(int(np.prod(SHAPE)))
        single, ens = [], []
        for c in test_cases:
            w, t, _ = maps[0][c.case_id]
            single.append(case_scores(threshold_labels(w, t), c.label))
            avg = [ensemble_average([m[c.case_id][k] for m in maps]) for k in range(3)]
            ens.append(case_scores(postprocess_case(*avg, policy), c.label))
        gaps.append((mean_region(ens, "mean"), mean_region(single, "mean")))
    ok = all(e >= s - 0.01 for e, s in gaps)
    detail = ", ".join(f"rep{i} ens+pp {e:.3f} vs single {s:.3f}" for i, (e, s) in enumerate(gaps))
    record(7, ok, detail)


def test_criterion_8_schedule():
    s = ScheduleState(lr0=1e-4)
    events = [s.update(1.0)]
    events += [s.update(1.0) for _ in range(7)]
    drops_after_7 = events.count("drop")
    lr_after_drop = s.lr
    while not s.stopped and len(events) < 1 + 16:
        events.append(s.update(1.0))
    non_improving = len(events) - 1
    ok = (drops_after_7 == 1 and events.count("drop") == 1 and events[-1] == "stop"
          and non_improving == 15 and lr_after_drop == pytest.approx(0.2e-4))
    record(8, ok, f"one drop to {lr_after_drop:.1e} after 6 stale epochs, stop after {non_improving}")


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    assert main(["phantom", "--out", str(tmp_path / "raw"), "--count", "20", "--seed", "3"]) == 0
    assert main(["preprocess", str(tmp_path / "raw" / "manifest.tsv"), "--out", str(tmp_path / "pre"),
                 "--final-dims", "16,16,8"]) == 0
    outs = []
    for run in ("a", "b"):
        argv = ["train", str(tmp_path / "pre" / "manifest.tsv"), "--seed", "7", "--epochs", "2",
                "--patches-per-case", "2", "--out", str(tmp_path / f"{run}.mpar"), "--log", str(tmp_path / f"{run}.csv")]
        assert main(argv) == 0
        outs.append([(tmp_path / f"{run}{ext}").read_bytes() for ext in (".mpar", ".csv", ".lnet.csv")])
    same = [x == y for x, y in zip(*outs)]
    record(9, all(same), f"parameters/log/L-Net log identical: {same}")
