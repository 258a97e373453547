"""Central finite-difference checks of the hand-written backward passes.

Errors are measured per parameter block as
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)``.
A finite-difference probe whose +h or -h evaluation flips a ReLU sign or a
max-pool winner straddles a non-differentiable point; such probes are
skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnengine as nn
from .models import UNet, UNetSpec, tnet_spec, wnet_spec
from .trainer import combined_loss, soft_dice_grad

STEP = 1e-3
FLOOR = 1e-6


@dataclass
class GradCheckResult:
    name: str
    errors: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol and self.checked > 0


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), FLOOR)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def walk_layers(obj):
    """Every primitive layer reachable from a network, block or layer."""
    if isinstance(obj, nn.SEBlock):
        yield obj
        yield from (obj.pool, obj.fc1, obj.relu, obj.fc2, obj.gate)
    elif isinstance(obj, nn.Layer):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from walk_layers(item)
    elif hasattr(obj, "layers") and not isinstance(obj, UNet):
        yield from walk_layers(obj.layers)
    elif isinstance(obj, UNet):
        yield from walk_layers([obj.enc, obj.pools, obj.up, obj.up_conv, obj.up_relu, obj.dec, obj.head])


def signature(objs) -> bytes:
    """Bytes identifying every ReLU sign pattern and max-pool winner."""
    parts = []
    for layer in walk_layers(objs):
        if isinstance(layer, nn.ReLU) and layer._cache is not None:
            parts.append(np.packbits(layer._cache).tobytes())
        elif isinstance(layer, nn.MaxPool3D) and layer._cache is not None:
            parts.append(layer._cache[1].astype(np.int8).tobytes())
    return b"|".join(parts)


def _probe(f, arr, idx, h, watch):
    old = arr[idx]
    base = signature(watch)
    arr[idx] = old + h
    fp = f()
    sp = signature(watch)
    arr[idx] = old - h
    fm = f()
    sm = signature(watch)
    arr[idx] = old
    f()  # restore caches at the unperturbed point
    return (fp - fm) / (2 * h), (sp == base and sm == base)


def check_arrays(f, targets, analytic, watch, rng, max_coords=None, h=STEP, result=None, name="check"):
    """Compare ``analytic[k]`` with central differences of scalar ``f`` over
    ``targets[k]`` (arrays perturbed in place).  ``max_coords`` caps the
    probes per array (sampled without replacement)."""
    result = result or GradCheckResult(name)
    f()
    base_sig = signature(watch)
    for key, arr in targets.items():
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        a_vals, n_vals = [], []
        for idx in coords:
            num, ok = _probe(f, arr, idx, h, watch)
            if not ok:
                result.skipped += 1
                continue
            a_vals.append(analytic[key][idx])
            n_vals.append(num)
        if a_vals:
            result.errors[key] = rel_error(np.array(a_vals), np.array(n_vals))
            result.checked += len(a_vals)
    assert signature(watch) == base_sig
    return result


def check_layer(layer, x, rng, max_coords=None, name=None) -> GradCheckResult:
    """Gradient check of a single layer under the loss ``sum(out * R)``."""
    multi = isinstance(x, list)
    out = layer.forward(x)
    R = rng.normal(size=out.shape)

    def f():
        return float(np.sum(layer.forward(x) * R))

    for p in layer.params():
        p.grad[...] = 0
    layer.forward(x)
    dx = layer.backward(R)
    targets, analytic = {}, {}
    if multi:
        for i, (xi, gi) in enumerate(zip(x, dx)):
            targets[f"input{i}"], analytic[f"input{i}"] = xi, gi
    else:
        targets["input"], analytic["input"] = x, dx
    for p in layer.params():
        targets[p.name], analytic[p.name] = p.value, p.grad.copy()
    return check_arrays(f, targets, analytic, layer, rng, max_coords, name=name or type(layer).__name__)


def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng, shape, spacing=0.01):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape).astype(np.float64)


def layer_cases(rng: np.random.Generator):
    """(name, layer, input) triples covering every layer type with random shapes."""
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    sp = tuple(int(s) for s in rng.integers(1, 3, size=3) * 2)
    shape = (n, c) + sp
    f64 = np.float64
    cases = [
        ("Conv3D", nn.Conv3D("conv", c, int(rng.integers(1, 4)), rng, f64), rng.normal(size=shape)),
        ("ReLU", nn.ReLU(), _away_from_zero(rng, shape)),
        ("Sigmoid", nn.Sigmoid(), rng.normal(size=shape) * 2),
        ("MaxPool3D", nn.MaxPool3D(), _distinct(rng, shape)),
        ("NearestUpsample3D", nn.NearestUpsample3D(), rng.normal(size=shape)),
        ("DownsampleInput", nn.DownsampleInput(2), rng.normal(size=shape)),
        ("ConcatChannels", nn.ConcatChannels(), [rng.normal(size=shape), rng.normal(size=(n, 2) + sp)]),
        ("AvgPoolToScalarPerChannel", nn.AvgPoolToScalarPerChannel(), rng.normal(size=shape)),
        ("Dense", nn.Dense("dense", c, int(rng.integers(1, 5)), rng, f64), rng.normal(size=(n, c))),
    ]
    se_c = 2 * int(rng.integers(1, 3))
    se = nn.SEBlock("se", se_c, 2, rng, f64)
    for p in se.params():
        p.value += rng.normal(size=p.shape) * 0.5
    cases.append(("SEBlock", se, rng.normal(size=(n, se_c) + sp)))
    return cases


def check_all_layers(seed: int) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    return [check_layer(layer, x, rng, name=name) for name, layer, x in layer_cases(rng)]


def _random_biases(net: UNet, rng) -> None:
    for p in net.params():
        if p.name.endswith("bias"):
            p.value[...] = rng.normal(size=p.shape) * 0.1


def check_cascade(seed: int, se: bool = True, max_coords: int = 6) -> GradCheckResult:
    """Full combined-loss gradient through a depth-1 W-Net -> T-Net cascade on 4^3.

    Checks every W-Net and T-Net parameter block (``max_coords`` sampled
    entries each) and the input image.
    """
    rng = np.random.default_rng(seed)
    common = dict(depth=1, base_channels=2, se=se, se_reduction=2)
    wnet = UNet(wnet_spec(**common), rng, np.float64)
    tnet = UNet(tnet_spec(**common), rng, np.float64)
    _random_biases(wnet, rng)
    _random_biases(tnet, rng)
    x = rng.normal(size=(1, 1, 4, 4, 4))
    whole_gt = rng.random((4, 4, 4)) < 0.5
    tumor_gt = whole_gt & (rng.random((4, 4, 4)) < 0.5)

    def f():
        pw = wnet.forward(x)
        pt = tnet.forward(np.concatenate([x, pw], axis=1))
        return combined_loss(pw[0, 0], whole_gt, pt[0, 0], tumor_gt).l_total

    nn.zero_grad(wnet.params() + tnet.params())
    pw = wnet.forward(x)
    pt = tnet.forward(np.concatenate([x, pw], axis=1))
    g_tin = tnet.backward(soft_dice_grad(pt[0, 0], tumor_gt)[None, None])
    dx = wnet.backward(soft_dice_grad(pw[0, 0], whole_gt)[None, None] + g_tin[:, 1:2]) + g_tin[:, 0:1]

    targets = {"input": x}
    analytic = {"input": dx}
    for prefix, net in (("wnet", wnet), ("tnet", tnet)):
        for p in net.params():
            targets[f"{prefix}.{p.name}"] = p.value
            analytic[f"{prefix}.{p.name}"] = p.grad.copy()
    return check_arrays(f, targets, analytic, [wnet, tnet], rng, max_coords, name=f"cascade seed {seed}")


def check_unet(spec: UNetSpec, shape, seed: int, max_coords: int = 6) -> GradCheckResult:
    """Gradient of ``sum(out * R)`` through a single U-Net."""
    rng = np.random.default_rng(seed)
    net = UNet(spec, rng, np.float64)
    _random_biases(net, rng)
    x = rng.normal(size=(1, spec.in_channels) + tuple(shape))
    out = net.forward(x)
    R = rng.normal(size=out.shape)

    def f():
        return float(np.sum(net.forward(x) * R))

    net.zero_grad()
    net.forward(x)
    dx = net.backward(R)
    targets = {"input": x}
    analytic = {"input": dx}
    for p in net.params():
        targets[p.name] = p.value
        analytic[p.name] = p.grad.copy()
    return check_arrays(f, targets, analytic, net, rng, max_coords, name=f"unet seed {seed}")
