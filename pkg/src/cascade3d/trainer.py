"""Losses, the Dice metric, the learning-rate schedule and the training and
cross-validation loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nnengine as nn
from .models import CascadeBundle, UNet, cascade_forward, run_patchwise
from .postproc import ThresholdPolicy, postprocess_case, threshold_labels
from .preprocess import PatchGrid, augment_rotate, resize_to
from .volcore import DimensionMismatch, TUMOR, Volume

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
REGIONS = ("kidney+tumor", "tumor", "mean")


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x)


def soft_dice_loss(u, v, eps: float = DICE_EPS) -> float:
    """``-2 sum(u v) / (sum(u) + sum(v) + eps)``."""
    u, v = _arr(u), _arr(v)
    if u.shape != v.shape:
        raise DimensionMismatch(f"prediction {u.shape} and target {v.shape} differ")
    u = u.astype(np.float64)
    v = v.astype(np.float64)
    return float(-2.0 * np.sum(u * v) / (np.sum(u) + np.sum(v) + eps))


def soft_dice_grad(u, v, eps: float = DICE_EPS) -> np.ndarray:
    """Gradient of :func:`soft_dice_loss` with respect to ``u`` (same dtype as ``u``)."""
    u, v = _arr(u), _arr(v)
    if u.shape != v.shape:
        raise DimensionMismatch(f"prediction {u.shape} and target {v.shape} differ")
    u64 = u.astype(np.float64)
    v64 = v.astype(np.float64)
    inter = np.sum(u64 * v64)
    den = np.sum(u64) + np.sum(v64) + eps
    return ((-2.0 * v64 * den + 2.0 * inter) / (den * den)).astype(u.dtype)


def region_masks(label) -> tuple[np.ndarray, np.ndarray]:
    """Whole (kidney + tumor) and tumor masks from a label map."""
    lab = _arr(label)
    return lab >= 1, lab == TUMOR


@dataclass
class LossReport:
    l_whole: float
    l_tumor: float
    l_total: float
    epoch: int = -1
    split: str = "train"


def combined_loss(whole_pred, whole_gt, tumor_pred, tumor_gt, epoch: int = -1, split: str = "train") -> LossReport:
    lw = soft_dice_loss(whole_pred, whole_gt)
    lt = soft_dice_loss(tumor_pred, tumor_gt)
    return LossReport(lw, lt, lw + lt, epoch, split)


def dsc(x, y) -> tuple[float, bool]:
    """Dice coefficient of two binary masks and whether both were empty.

    Two empty masks score 1.0 with the flag set.
    """
    x, y = _arr(x).astype(bool), _arr(y).astype(bool)
    if x.shape != y.shape:
        raise DimensionMismatch(f"masks {x.shape} and {y.shape} differ")
    nx, ny = int(np.count_nonzero(x)), int(np.count_nonzero(y))
    if nx + ny == 0:
        return 1.0, True
    return 2.0 * int(np.count_nonzero(x & y)) / (nx + ny), False


def case_scores(pred_label, gt_label) -> dict[str, tuple[float, bool]]:
    pw, pt = region_masks(pred_label)
    gw, gt = region_masks(gt_label)
    whole = dsc(pw, gw)
    tumor = dsc(pt, gt)
    return {"kidney+tumor": whole, "tumor": tumor, "mean": ((whole[0] + tumor[0]) / 2, whole[1] and tumor[1])}


@dataclass
class ScheduleState:
    """Plateau learning-rate drop and early stopping on the validation loss.

    A shared counter tracks epochs since the last improvement (a decrease
    of at least ``min_delta``).  When it reaches ``plateau_patience`` the
    learning rate drops by ``factor`` (once per plateau); when it reaches
    ``stop_patience`` training stops.
    """

    lr0: float = 1e-4
    plateau_patience: int = 6
    factor: float = 0.2
    stop_patience: int = 15
    min_delta: float = 1e-4
    best: float = math.inf
    since_improvement: int = 0
    drops: int = 0
    stopped: bool = False

    @property
    def lr(self) -> float:
        return self.lr0 * self.factor ** self.drops

    def update(self, val_loss: float) -> str:
        if self.stopped:
            raise RuntimeError("schedule already stopped")
        if self.best - val_loss >= self.min_delta:
            self.best = val_loss
            self.since_improvement = 0
            return "improved"
        self.since_improvement += 1
        if self.since_improvement >= self.stop_patience:
            self.stopped = True
            return "stop"
        if self.since_improvement == self.plateau_patience:
            self.drops += 1
            return "drop"
        return "wait"


@dataclass
class Case:
    case_id: str
    image: Volume
    label: Volume


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-4
    l2: float = 1e-5
    seed: int = 0
    patches_per_case: int | None = None
    max_angle: float = 1.0
    augment: bool = True
    plateau_patience: int = 6
    plateau_factor: float = 0.2
    stop_patience: int = 15
    min_delta: float = 1e-4
    lnet_epochs: int | None = None
    train_lnet: bool = True


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: LossReport
    val: LossReport
    event: str

    def line(self) -> str:
        t = self.train
        return f"{self.epoch},{self.lr:.6g},{t.l_whole:.6f},{t.l_tumor:.6f},{t.l_total:.6f},{self.val.l_total:.6f}"


LOG_HEADER = "epoch,lr,l_whole,l_tumor,l_total,val_total"


@dataclass
class TrainResult:
    bundle: CascadeBundle
    log: list[EpochRecord] = field(default_factory=list)
    lnet_log: list[tuple[int, float, float, float]] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [LOG_HEADER] + [r.line() for r in self.log]


def _t5(a: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(a, dtype=dtype)[None, None]


def joint_step(wnet: UNet, tnet: UNet, x: np.ndarray, whole_gt: np.ndarray, tumor_gt: np.ndarray):
    """Forward and backward of the W-Net -> T-Net chain on one patch.

    ``x`` is a (1, 1, D, H, W) tensor.  The T-Net loss back-propagates
    through the W-Net probability map into the W-Net.  Gradients are
    accumulated into both networks; returns the loss report.
    """
    pw = wnet.forward(x)
    pt = tnet.forward(np.concatenate([x, pw], axis=1))
    report = combined_loss(pw[0, 0], whole_gt, pt[0, 0], tumor_gt)
    g_t = soft_dice_grad(pt[0, 0], tumor_gt)[None, None]
    g_tin = tnet.backward(g_t)
    g_w = soft_dice_grad(pw[0, 0], whole_gt)[None, None] + g_tin[:, 1:2]
    wnet.backward(g_w)
    return report


def _augment(case: Case, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not cfg.augment or cfg.max_angle == 0:
        return case.image.data, case.label.data
    angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle))
    img = augment_rotate(case.image, angle, max_angle=cfg.max_angle).data
    lab = augment_rotate(case.label, angle, max_angle=cfg.max_angle).data
    return img, lab


def validation_loss(bundle: CascadeBundle, cases: list[Case], epoch: int = -1) -> LossReport:
    """Mean combined loss over whole stitched validation volumes."""
    if not cases:
        return LossReport(math.nan, math.nan, math.nan, epoch, "val")
    lw = lt = 0.0
    for case in cases:
        grid = PatchGrid(case.image.shape, bundle.patch_shape, bundle.overlap)
        img = case.image.data.astype(bundle.wnet.dtype)
        whole = run_patchwise(bundle.wnet, img, grid)
        tumor = run_patchwise(bundle.tnet, np.stack([img, whole.astype(img.dtype)]), grid)
        gw, gt = region_masks(case.label)
        r = combined_loss(whole, gw, tumor, gt)
        lw += r.l_whole
        lt += r.l_tumor
    n = len(cases)
    return LossReport(lw / n, lt / n, (lw + lt) / n, epoch, "val")


def _snapshot(nets) -> list[np.ndarray]:
    return [p.value.copy() for net in nets for p in net.params()]


def _restore(nets, values) -> None:
    for p, v in zip((p for net in nets for p in net.params()), values):
        p.value[...] = v


def _check(loss: float, what: str) -> None:
    if not math.isfinite(loss):
        raise nn.NumericError(f"non-finite loss ({loss}) {what}")


def train_cascade(bundle: CascadeBundle, train_cases: list[Case], val_cases: list[Case],
                  cfg: TrainConfig, rng: np.random.Generator) -> list[EpochRecord]:
    """Joint end-to-end training of W-Net and T-Net; restores the best-validation parameters."""
    nets = [bundle.wnet, bundle.tnet]
    params = bundle.wnet.params() + bundle.tnet.params()
    adam = nn.AdamState(lr=cfg.lr, l2=cfg.l2)
    sched = ScheduleState(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.stop_patience, cfg.min_delta)
    dtype = bundle.wnet.dtype
    records = []
    best = None
    for epoch in range(cfg.epochs):
        adam.lr = sched.lr
        lw = lt = 0.0
        steps = 0
        for ci in rng.permutation(len(train_cases)):
            case = train_cases[ci]
            img, lab = _augment(case, cfg, rng)
            gw_full, gt_full = region_masks(lab)
            grid = PatchGrid(img.shape, bundle.patch_shape, bundle.overlap)
            order = rng.permutation(len(grid))
            if cfg.patches_per_case is not None:
                order = order[: cfg.patches_per_case]
            for pi in order:
                sl = grid.slices(grid.origins[pi])
                nn.zero_grad(params)
                r = joint_step(bundle.wnet, bundle.tnet, _t5(img[sl], dtype), gw_full[sl], gt_full[sl])
                _check(r.l_total, f"at epoch {epoch}, case {case.case_id}, patch {grid.origins[pi]}")
                nn.adam_step(params, adam)
                lw += r.l_whole
                lt += r.l_tumor
                steps += 1
        train_rep = LossReport(lw / steps, lt / steps, (lw + lt) / steps, epoch, "train")
        val_rep = validation_loss(bundle, val_cases or train_cases, epoch)
        _check(val_rep.l_total, f"on validation at epoch {epoch}")
        lr_used = adam.lr
        event = sched.update(val_rep.l_total)
        if event == "improved":
            best = _snapshot(nets)
        records.append(EpochRecord(epoch, lr_used, train_rep, val_rep, event))
        log.info("%s", records[-1].line())
        if sched.stopped:
            break
    if best is not None:
        _restore(nets, best)
    return records


def coarse_target(whole_mask: np.ndarray, shape) -> np.ndarray:
    """Low-resolution whole-region target: a coarse voxel is foreground if
    any fine voxel mapping onto it is."""
    out = whole_mask.astype(np.uint8)
    for axis, m in enumerate(shape):
        n = out.shape[axis]
        starts = np.unique(np.floor(np.arange(m) * n / m).astype(np.intp))
        if len(starts) != m:
            raise ValueError(f"cannot coarsen axis of size {n} to {m}")
        out = np.maximum.reduceat(out, starts, axis=axis)
    return out.astype(bool)


def train_lnet(bundle: CascadeBundle, train_cases: list[Case], val_cases: list[Case],
               cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, float, float, float]]:
    """Train the localisation network on whole downsampled volumes."""
    net = bundle.lnet
    params = net.params()
    adam = nn.AdamState(lr=cfg.lr, l2=cfg.l2)
    sched = ScheduleState(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.stop_patience, cfg.min_delta)
    dims = tuple(reversed(bundle.lnet_shape))

    def prepare(img, lab):
        x = resize_to(Volume(img), dims, "trilinear").data
        return _t5(x, net.dtype), coarse_target(lab >= 1, bundle.lnet_shape)

    val_data = [prepare(c.image.data, c.label.data) for c in (val_cases or train_cases)]
    records = []
    best = None
    for epoch in range(cfg.lnet_epochs if cfg.lnet_epochs is not None else cfg.epochs):
        adam.lr = sched.lr
        total = 0.0
        for ci in rng.permutation(len(train_cases)):
            case = train_cases[ci]
            x, target = prepare(*_augment(case, cfg, rng))
            nn.zero_grad(params)
            p = net.forward(x)
            loss = soft_dice_loss(p[0, 0], target)
            _check(loss, f"in L-Net training at epoch {epoch}, case {case.case_id}")
            net.backward(soft_dice_grad(p[0, 0], target)[None, None])
            nn.adam_step(params, adam)
            total += loss
        val = float(np.mean([soft_dice_loss(net.forward(x)[0, 0], t) for x, t in val_data]))
        records.append((epoch, adam.lr, total / len(train_cases), val))
        if sched.update(val) == "improved":
            best = _snapshot([net])
        if sched.stopped:
            break
    if best is not None:
        _restore([net], best)
    return records


def train(bundle: CascadeBundle, train_cases: list[Case], val_cases: list[Case] | None = None,
          cfg: TrainConfig | None = None) -> TrainResult:
    """Train W-Net and T-Net jointly, then the L-Net on its own.

    With no validation cases the training cases double as the validation
    set.  Returns the bundle carrying the best-validation parameters.
    """
    cfg = cfg or TrainConfig()
    if not train_cases:
        raise ValueError("no training cases")
    ss = np.random.SeedSequence(cfg.seed)
    rng_cascade, rng_lnet = (np.random.default_rng(s) for s in ss.spawn(2))
    val_cases = val_cases or []
    records = train_cascade(bundle, train_cases, val_cases, cfg, rng_cascade)
    lnet_records = train_lnet(bundle, train_cases, val_cases, cfg, rng_lnet) if cfg.train_lnet else []
    return TrainResult(bundle, records, lnet_records)


def predict_labels(bundle: CascadeBundle, image: Volume, policy: ThresholdPolicy | None = None,
                   postprocess: bool = True) -> Volume:
    whole, tumor, loc = cascade_forward(image, bundle)
    if postprocess:
        return postprocess_case(whole, tumor, loc, policy or ThresholdPolicy.scaled(int(np.prod(image.shape))))
    return threshold_labels(whole, tumor)


@dataclass
class CVReport:
    fold_rows: list[tuple[int, str, float]]
    mean: dict[str, float]
    sd: dict[str, float]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "region", "dsc"])
            for fold, region, value in self.fold_rows:
                w.writerow([fold, region, f"{value:.6f}"])
            for region in REGIONS:
                w.writerow(["mean", region, f"{self.mean[region]:.6f}"])
            for region in REGIONS:
                w.writerow(["sd", region, f"{self.sd[region]:.6f}"])


def summarize_folds(per_fold: list[dict[str, float]]) -> CVReport:
    rows = [(k, region, scores[region]) for k, scores in enumerate(per_fold) for region in REGIONS]
    mean = {r: float(np.mean([s[r] for s in per_fold])) for r in REGIONS}
    sd = {r: float(np.std([s[r] for s in per_fold])) for r in REGIONS}
    return CVReport(rows, mean, sd)


def cross_validate(cases: list[Case], k: int, cfg: TrainConfig, make_bundle, seed: int = 0,
                   policy: ThresholdPolicy | None = None, csv_path=None) -> CVReport:
    """k-fold cross-validation: train on k-1 folds, score the held-out fold.

    ``make_bundle(fold)`` returns a freshly initialised bundle.  Each fold
    trains with its own seed derived from ``cfg.seed`` and the fold index.
    """
    from .vio import split_folds

    if len(cases) < k:
        raise ValueError(f"{len(cases)} cases cannot fill {k} folds")
    by_id = {c.case_id: c for c in cases}
    split = split_folds(list(by_id), k, seed)
    per_fold = []
    for fold in range(k):
        held = [by_id[i] for i in sorted(by_id) if split.assignment[i] == fold]
        rest = [by_id[i] for i in sorted(by_id) if split.assignment[i] != fold]
        fold_cfg = replace(cfg, seed=cfg.seed * 1000 + fold)
        result = train(make_bundle(fold), rest, None, fold_cfg)
        scores = [case_scores(predict_labels(result.bundle, c.image, policy), c.label) for c in held]
        per_fold.append({r: float(np.mean([s[r][0] for s in scores])) for r in REGIONS})
    report = summarize_folds(per_fold)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report
