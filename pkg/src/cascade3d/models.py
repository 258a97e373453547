"""U-Net graphs for the localisation (L), whole-region (W) and tumor (T)
networks, and the cascade that chains them at inference time.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nnengine as nn
from .preprocess import PatchGrid, extract_patches, resize_to, stitch_patches
from .volcore import Volume, prob_map


@dataclass
class UNetSpec:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    input_pyramid: bool = False
    se: bool = False
    se_reduction: int = 2
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth, base_channels and in_channels must be >= 1")
        if self.out_channels != 1:
            raise ValueError("only single-channel sigmoid heads are supported")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def to_text(self) -> str:
        return "".join(f"{k}={int(v) if isinstance(v, bool) else v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "UNetSpec":
        kv = dict(line.split("=", 1) for line in text.split("\n") if "=" in line)
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                raw = kv[f.name].strip()
                kwargs[f.name] = bool(int(raw)) if f.type in ("bool", bool) else int(raw)
        return cls(**kwargs)


def lnet_spec(**kw) -> UNetSpec:
    return UNetSpec(**{"in_channels": 1, "input_pyramid": False, **kw})


def wnet_spec(**kw) -> UNetSpec:
    return UNetSpec(**{"in_channels": 1, "input_pyramid": True, **kw})


def tnet_spec(**kw) -> UNetSpec:
    return UNetSpec(**{"in_channels": 2, "input_pyramid": True, **kw})


class ConvBlock:
    """(conv -> ReLU) x 2, optionally followed by squeeze-and-excitation."""

    def __init__(self, name, in_ch, out_ch, se, reduction, rng, dtype):
        self.conv1 = nn.Conv3D(f"{name}.conv1", in_ch, out_ch, rng, dtype)
        self.relu1 = nn.ReLU(f"{name}.relu1")
        self.conv2 = nn.Conv3D(f"{name}.conv2", out_ch, out_ch, rng, dtype)
        self.relu2 = nn.ReLU(f"{name}.relu2")
        self.layers = [self.conv1, self.relu1, self.conv2, self.relu2]
        if se:
            self.layers.append(nn.SEBlock(f"{name}.se", out_ch, reduction, rng, dtype))

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class UNet:
    """Encoder-decoder with skip connections and a 1-channel sigmoid head.

    Encoder level ``i`` works at ``1/2**i`` resolution with ``base * 2**i``
    channels; level ``depth`` is the bottleneck.  With ``input_pyramid`` the
    input of every level ``i >= 1`` is the pooled feature map concatenated
    with the raw input average-pooled by ``2**i``.  The decoder upsamples by
    nearest neighbour followed by a convolution.
    """

    def __init__(self, spec: UNetSpec, rng: np.random.Generator | None = None, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        ch = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        self.channels = ch
        self.level_input_channels = []
        self.enc = []
        self.pools = []
        self.pyramid = []
        self.pyr_concat = []
        for i in range(spec.depth + 1):
            if i == 0:
                cin = spec.in_channels
            else:
                cin = ch[i - 1] + (spec.in_channels if spec.input_pyramid else 0)
                self.pools.append(nn.MaxPool3D(f"enc{i}.pool"))
                self.pyramid.append(nn.DownsampleInput(2 ** i, f"enc{i}.pyramid"))
                self.pyr_concat.append(nn.ConcatChannels(f"enc{i}.concat"))
            self.level_input_channels.append(cin)
            name = "bottleneck" if i == spec.depth else f"enc{i}"
            self.enc.append(ConvBlock(name, cin, ch[i], spec.se, spec.se_reduction, rng, dtype))
        self.up = []
        self.up_conv = []
        self.up_relu = []
        self.skip_concat = []
        self.dec = []
        for i in reversed(range(spec.depth)):
            self.up.append(nn.NearestUpsample3D(f"dec{i}.up"))
            self.up_conv.append(nn.Conv3D(f"dec{i}.upconv", ch[i + 1], ch[i], rng, dtype))
            self.up_relu.append(nn.ReLU(f"dec{i}.uprelu"))
            self.skip_concat.append(nn.ConcatChannels(f"dec{i}.concat"))
            self.dec.append(ConvBlock(f"dec{i}", 2 * ch[i], ch[i], spec.se, spec.se_reduction, rng, dtype))
        self.head = nn.Conv3D("head", ch[0], spec.out_channels, rng, dtype)
        self.head_act = nn.Sigmoid("head.sigmoid")

    # -- graph inspection -------------------------------------------------

    def params(self) -> list[nn.ParamBlock]:
        out = []
        for block in self.enc:
            out += block.params()
        for conv, block in zip(self.up_conv, self.dec):
            out += conv.params() + block.params()
        out += self.head.params()
        return out

    def named_params(self) -> dict[str, nn.ParamBlock]:
        return {p.name: p for p in self.params()}

    def describe(self) -> list[str]:
        """One line per layer, in execution order."""
        lines = []
        for i, block in enumerate(self.enc):
            if i > 0:
                lines.append(f"{self.pools[i - 1].name} MaxPool3D")
                if self.spec.input_pyramid:
                    lines.append(f"{self.pyramid[i - 1].name} DownsampleInput x{2 ** i}")
                    lines.append(f"{self.pyr_concat[i - 1].name} ConcatChannels -> {self.level_input_channels[i]}")
            for layer in block.layers:
                lines.append(_describe_layer(layer))
        for k in range(self.spec.depth):
            lines.append(f"{self.up[k].name} NearestUpsample3D")
            lines.append(_describe_layer(self.up_conv[k]))
            lines.append(f"{self.up_relu[k].name} ReLU")
            lines.append(f"{self.skip_concat[k].name} ConcatChannels")
            for layer in self.dec[k].layers:
                lines.append(_describe_layer(layer))
        lines.append(_describe_layer(self.head))
        lines.append("head.sigmoid Sigmoid")
        return lines

    def check_input_shape(self, shape) -> None:
        if len(shape) != 5:
            raise nn.ShapeError(f"expected a 5-D tensor, got shape {tuple(shape)}")
        if shape[1] != self.spec.in_channels:
            raise nn.ShapeError(f"expected {self.spec.in_channels} input channels, got {shape[1]}")
        m = self.spec.multiple
        if any(s % m or s == 0 for s in shape[2:]):
            raise nn.ShapeError(f"spatial dims {tuple(shape[2:])} must be positive multiples of {m}")

    # -- forward / backward -----------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.check_input_shape(x.shape)
        x = np.asarray(x, dtype=self.dtype)
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            if i > 0:
                h = self.pools[i - 1].forward(h)
                if self.spec.input_pyramid:
                    h = self.pyr_concat[i - 1].forward([h, self.pyramid[i - 1].forward(x)])
            h = block.forward(h)
            if nn.DEBUG:
                nn.check_finite(h, f"encoder level {i}")
            skips.append(h)
        h = skips.pop()
        for k in range(self.spec.depth):
            h = self.up_relu[k].forward(self.up_conv[k].forward(self.up[k].forward(h)))
            h = self.skip_concat[k].forward([h, skips.pop()])
            h = self.dec[k].forward(h)
        out = self.head_act.forward(self.head.forward(h))
        if nn.DEBUG:
            nn.check_finite(out, "head")
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input."""
        depth = self.spec.depth
        g = self.head.backward(self.head_act.backward(dout))
        skip_grads = [None] * depth
        for k in reversed(range(depth)):
            g = self.dec[k].backward(g)
            g_up, g_skip = self.skip_concat[k].backward(g)
            skip_grads[depth - 1 - k] = g_skip
            g = self.up[k].backward(self.up_conv[k].backward(self.up_relu[k].backward(g_up)))
        dx = None
        for i in reversed(range(depth + 1)):
            if i < depth:
                g = g + skip_grads[i]
            g = self.enc[i].backward(g)
            if i > 0:
                if self.spec.input_pyramid:
                    g, g_in = self.pyr_concat[i - 1].backward(g)
                    g_in = self.pyramid[i - 1].backward(g_in)
                    dx = g_in if dx is None else dx + g_in
                g = self.pools[i - 1].backward(g)
        return g if dx is None else g + dx

    def zero_grad(self) -> None:
        nn.zero_grad(self.params())

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


def _describe_layer(layer) -> str:
    if isinstance(layer, nn.Conv3D):
        return f"{layer.name} Conv3D {layer.in_ch}->{layer.out_ch}"
    if isinstance(layer, nn.SEBlock):
        return f"{layer.name} SEBlock {layer.channels} hidden={layer.fc1.out_f}"
    return f"{layer.name} {type(layer).__name__}"


def build_unet(spec: UNetSpec, input_shape=None, rng: np.random.Generator | None = None,
               dtype=np.float32) -> UNet:
    """Build a U-Net; with ``input_shape`` (array order, 3 or 5 dims) the
    spatial divisibility is checked before any parameters are allocated."""
    if input_shape is not None:
        spatial = tuple(input_shape)[-3:]
        m = spec.multiple
        if any(s % m or s == 0 for s in spatial):
            raise nn.ShapeError(f"spatial dims {spatial} must be positive multiples of 2**depth = {m}")
    return UNet(spec, rng, dtype)


@dataclass
class CascadeBundle:
    """The three networks plus the geometry they run at.

    ``lnet_shape`` is the array-order grid the whole image is resized to
    for the L-Net; ``patch_shape``/``overlap`` drive the W-Net/T-Net
    sliding window.
    """

    lnet: UNet
    wnet: UNet
    tnet: UNet
    lnet_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]
    overlap: tuple[int, int, int]

    def __post_init__(self):
        if self.tnet.spec.in_channels != 2:
            raise ValueError("T-Net must take 2 input channels")
        if self.wnet.spec.in_channels != 1 or self.lnet.spec.in_channels != 1:
            raise ValueError("L-Net and W-Net must take 1 input channel")
        self.lnet_shape = tuple(self.lnet_shape)
        self.patch_shape = tuple(self.patch_shape)
        self.overlap = tuple(self.overlap)
        self.lnet.check_input_shape((1, 1) + self.lnet_shape)
        self.wnet.check_input_shape((1, 1) + self.patch_shape)
        self.tnet.check_input_shape((1, 2) + self.patch_shape)

    def networks(self) -> dict[str, UNet]:
        return {"lnet": self.lnet, "wnet": self.wnet, "tnet": self.tnet}


def make_bundle(volume_shape, lnet_shape, patch_shape, overlap, depth=3, lnet_depth=None,
                base_channels=8, se=False, se_reduction=2, seed=0, dtype=np.float32) -> CascadeBundle:
    """Freshly initialised bundle; each network draws from its own seeded stream."""
    ss = np.random.SeedSequence(seed)
    r_l, r_w, r_t = (np.random.default_rng(s) for s in ss.spawn(3))
    common = dict(base_channels=base_channels, se=se, se_reduction=se_reduction)
    for p, n in zip(patch_shape, volume_shape):
        if p > n:
            raise ValueError(f"patch {tuple(patch_shape)} larger than volume {tuple(volume_shape)}")
    return CascadeBundle(
        lnet=build_unet(lnet_spec(depth=lnet_depth or depth, **common), lnet_shape, r_l, dtype),
        wnet=build_unet(wnet_spec(depth=depth, **common), patch_shape, r_w, dtype),
        tnet=build_unet(tnet_spec(depth=depth, **common), patch_shape, r_t, dtype),
        lnet_shape=lnet_shape,
        patch_shape=patch_shape,
        overlap=overlap,
    )


def _as_tensor(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 4 else a[None, None]


def run_patchwise(net: UNet, arr: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Sliding-window inference of ``net`` over ``arr`` (C, D, H, W) or (D, H, W)."""
    preds = [(o, net.forward(_as_tensor(p))[0, 0]) for o, p in extract_patches(arr, grid)]
    return stitch_patches(preds, grid.shape).data


def cascade_forward(image: Volume, bundle: CascadeBundle, trace: dict | None = None):
    """Run L-Net, W-Net and T-Net on a preprocessed image.

    Returns ``(whole, tumor, loc)`` probability maps; ``whole`` and ``tumor``
    share the image grid, ``loc`` sits on the L-Net grid.  When ``trace`` is
    a dict the T-Net input is recorded under ``"tnet_input"``.
    """
    shape = image.shape
    grid = PatchGrid(shape, bundle.patch_shape, bundle.overlap)
    ldims = tuple(reversed(bundle.lnet_shape))
    small = resize_to(image, ldims, "trilinear")
    loc = bundle.lnet.forward(_as_tensor(small.data))[0, 0]
    img = image.data.astype(bundle.wnet.dtype)
    whole = run_patchwise(bundle.wnet, img, grid)
    t_in = np.stack([img, whole.astype(img.dtype)])
    if trace is not None:
        trace["tnet_input"] = t_in
        trace["whole"] = whole
    tumor = run_patchwise(bundle.tnet, t_in, grid)
    return (prob_map(whole, image.spacing), prob_map(tumor, image.spacing),
            prob_map(loc, small.spacing))


def bundle_params(bundle: CascadeBundle) -> dict[str, np.ndarray]:
    return {f"{key}.{p.name}": p.value for key, net in bundle.networks().items() for p in net.params()}


def bundle_arch_text(bundle: CascadeBundle) -> str:
    parts = []
    for key, net in bundle.networks().items():
        parts.append(f"[{key}]\n{net.spec.to_text()}")
    geo = {"lnet_shape": bundle.lnet_shape, "patch_shape": bundle.patch_shape, "overlap": bundle.overlap}
    parts.append("[geometry]\n" + "".join(f"{k}={','.join(map(str, v))}\n" for k, v in geo.items()))
    return "".join(parts)


def parse_arch_text(text: str) -> tuple[dict[str, UNetSpec], dict[str, tuple[int, ...]]]:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif line and current is not None:
            sections[current].append(line)
    try:
        specs = {k: UNetSpec.from_text("\n".join(sections[k])) for k in ("lnet", "wnet", "tnet")}
        geo = dict(line.split("=", 1) for line in sections["geometry"])
        geometry = {k: tuple(int(x) for x in geo[k].split(",")) for k in ("lnet_shape", "patch_shape", "overlap")}
    except KeyError as e:
        raise ValueError(f"architecture text lacks section or key {e.args[0]!r}") from None
    return specs, geometry


def save_bundle(bundle: CascadeBundle, path) -> None:
    from .vio import save_params

    save_params(bundle_params(bundle), path, bundle_arch_text(bundle))


def load_bundle(path, dtype=np.float32) -> CascadeBundle:
    """Rebuild a bundle from a parameter file, validating every block."""
    from .vio import ArchitectureMismatch, assign_params, load_params

    params, arch = load_params(path)
    specs, geo = parse_arch_text(arch)
    bundle = CascadeBundle(
        lnet=UNet(specs["lnet"], None, dtype),
        wnet=UNet(specs["wnet"], None, dtype),
        tnet=UNet(specs["tnet"], None, dtype),
        **geo,
    )
    for key, net in bundle.networks().items():
        prefix = f"{key}."
        sub = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        assign_params(net.params(), sub)
    known = {f"{k}." for k in bundle.networks()}
    stray = [k for k in params if not any(k.startswith(p) for p in known)]
    if stray:
        raise ArchitectureMismatch(stray[0], "not present in the architecture")
    return bundle
