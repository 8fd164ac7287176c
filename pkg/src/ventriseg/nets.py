"""Depth-parameterized 2D and 3D encoder-decoder segmentation networks.

Two families share one implementation:

* ``unet2d`` processes coronal slices; depth levels 1..4 carry the nominal
  layer counts 9/14/19/24.  Each extra level inserts, at the bottom of the
  U, a max pooling, two 3x3 convolutions, a 2x2 deconvolution and two more
  3x3 convolutions (5 learnable layers).
* ``vnet3d`` processes sub-volumes; depth levels 0..3 carry the nominal
  layer counts 7/15/23/31.  Each extra level inserts a strided 2x2x2
  convolution, three 3x3x3 convolutions, a 2x2x2 deconvolution and three
  more convolutions (8 learnable layers).

With ``use_cppn`` the 8 location-pattern channels are concatenated with the
first convolution block's full-resolution features, so low-level feature
extraction stays translation invariant; everything downstream may exploit
position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .cppn import BN_EPS, BN_MOMENTUM, PATTERN_CHANNELS, PatternNet

DEPTH_RANGES = {"unet2d": (1, 4), "vnet3d": (0, 3)}
DEFAULT_BASE_CHANNELS = {"unet2d": 64, "vnet3d": 40}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description; fully determines the parameter layout."""

    family: str
    depth_level: int
    base_channels: int | None = None
    use_cppn: bool = False
    cppn_hidden: tuple[int, int] = (16, 16)
    in_channels: int = 1
    classes: int = 2

    def __post_init__(self):
        if self.family not in DEPTH_RANGES:
            raise ValueError(f"unknown family {self.family!r}")
        lo, hi = DEPTH_RANGES[self.family]
        if not lo <= self.depth_level <= hi:
            raise ValueError(
                f"{self.family} depth_level must be in [{lo}, {hi}], got {self.depth_level}"
            )
        if self.base_channels is not None and self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        object.__setattr__(self, "cppn_hidden", tuple(self.cppn_hidden))

    @property
    def base(self) -> int:
        if self.base_channels is not None:
            return self.base_channels
        return DEFAULT_BASE_CHANNELS[self.family]

    @property
    def nominal_layers(self) -> int:
        if self.family == "unet2d":
            return 4 + 5 * self.depth_level
        return 7 + 8 * self.depth_level

    @property
    def spatial_dims(self) -> int:
        return 2 if self.family == "unet2d" else 3

    def width(self, level: int) -> int:
        return self.base * (2 ** level)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth_level": self.depth_level,
            "base_channels": self.base_channels,
            "use_cppn": self.use_cppn,
            "cppn_hidden": list(self.cppn_hidden),
            "in_channels": self.in_channels,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            family=d["family"],
            depth_level=d["depth_level"],
            base_channels=d.get("base_channels"),
            use_cppn=d.get("use_cppn", False),
            cppn_hidden=tuple(d.get("cppn_hidden", (16, 16))),
            in_channels=d.get("in_channels", 1),
            classes=d.get("classes", 2),
        )


def grow_depth(spec: NetworkSpec) -> NetworkSpec:
    """Extend the architecture by one level at the bottleneck."""
    lo, hi = DEPTH_RANGES[spec.family]
    if spec.depth_level >= hi:
        raise ValueError(f"{spec.family} is already at maximum depth {hi}")
    return replace(spec, depth_level=spec.depth_level + 1)


# ---------------------------------------------------------------------------
# Structural plan: one descriptor per learnable layer, in forward order.
# The module constructor and the tests both consume this.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str  # "conv" | "down" | "deconv" | "classifier"
    level: int
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


def layer_plan(spec: NetworkSpec) -> list[LayerDesc]:
    d = spec.depth_level
    b = spec.base
    fused = b + (PATTERN_CHANNELS if spec.use_cppn else 0)
    plan: list[LayerDesc] = []

    def conv(name, level, cin, cout, kernel=3, stride=1, kind="conv"):
        plan.append(LayerDesc(name, kind, level, cin, cout, kernel, stride))

    conv("enc0.conv0", 0, spec.in_channels, b)
    conv("enc0.conv1", 0, b, b)
    conv("enc0.conv2", 0, b, b)

    if spec.family == "unet2d":
        for lvl in range(1, d + 1):
            cin = fused if lvl == 1 else spec.width(lvl - 1)
            conv(f"enc{lvl}.conv0", lvl, cin, spec.width(lvl))
            conv(f"enc{lvl}.conv1", lvl, spec.width(lvl), spec.width(lvl))
        for lvl in range(d, 0, -1):
            below = spec.width(lvl - 1)
            skip = fused if lvl - 1 == 0 else below
            conv(f"up{lvl}.deconv", lvl, spec.width(lvl), below, kernel=2,
                 stride=2, kind="deconv")
            conv(f"dec{lvl - 1}.conv0", lvl - 1, below + skip, below)
            conv(f"dec{lvl - 1}.conv1", lvl - 1, below, below)
        conv("classifier", 0, b, spec.classes, kernel=1, kind="classifier")
    else:
        for lvl in range(1, d + 1):
            cin = fused if lvl == 1 else spec.width(lvl - 1)
            conv(f"down{lvl}", lvl, cin, spec.width(lvl), kernel=2, stride=2,
                 kind="down")
            for k in range(3):
                conv(f"enc{lvl}.conv{k}", lvl, spec.width(lvl), spec.width(lvl))
        for lvl in range(d, 0, -1):
            below = spec.width(lvl - 1)
            skip = fused if lvl - 1 == 0 else below
            conv(f"up{lvl}.deconv", lvl, spec.width(lvl), below, kernel=2,
                 stride=2, kind="deconv")
            conv(f"dec{lvl - 1}up.conv0", lvl - 1, below + skip, below)
            conv(f"dec{lvl - 1}up.conv1", lvl - 1, below, below)
            conv(f"dec{lvl - 1}up.conv2", lvl - 1, below, below)
        cin0 = fused if d == 0 else b
        conv("out0.conv0", 0, cin0, b)
        conv("out0.conv1", 0, b, b)
        conv("out0.conv2", 0, b, b)
        conv("classifier", 0, b, spec.classes, kernel=1, kind="classifier")
    return plan


# ---------------------------------------------------------------------------
# Torch module
# ---------------------------------------------------------------------------

def _cbr(dims: int, cin: int, cout: int, dtype) -> nn.Sequential:
    conv_cls = nn.Conv2d if dims == 2 else nn.Conv3d
    bn_cls = nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d
    return nn.Sequential(
        conv_cls(cin, cout, kernel_size=3, padding=1, dtype=dtype),
        bn_cls(cout, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=dtype),
        nn.ReLU(inplace=True),
    )


class Network(nn.Module):
    """Parameterized instance of a :class:`NetworkSpec`.

    Forward input is (B, in_channels, H, W) for unet2d or
    (B, in_channels, D, H, W) for vnet3d, spatial dims divisible by
    ``2 ** depth_level``; output is per-class softmax probabilities with
    the same spatial shape.
    """

    def __init__(self, spec: NetworkSpec, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        dims = spec.spatial_dims
        d = spec.depth_level
        b = spec.base
        fused = b + (PATTERN_CHANNELS if spec.use_cppn else 0)
        conv_cls = nn.Conv2d if dims == 2 else nn.Conv3d
        deconv_cls = nn.ConvTranspose2d if dims == 2 else nn.ConvTranspose3d

        self.enc0 = nn.Sequential(
            _cbr(dims, spec.in_channels, b, dtype), _cbr(dims, b, b, dtype),
            _cbr(dims, b, b, dtype),
        )
        self.pattern_net = PatternNet(spec.cppn_hidden, dtype=dtype) if spec.use_cppn else None

        self.downs = nn.ModuleList()
        self.enc_blocks = nn.ModuleList()
        for lvl in range(1, d + 1):
            cin = fused if lvl == 1 else spec.width(lvl - 1)
            w = spec.width(lvl)
            if spec.family == "unet2d":
                self.downs.append(nn.MaxPool2d(2))
                self.enc_blocks.append(
                    nn.Sequential(_cbr(dims, cin, w, dtype), _cbr(dims, w, w, dtype))
                )
            else:
                self.downs.append(
                    nn.Sequential(
                        conv_cls(cin, w, kernel_size=2, stride=2, dtype=dtype),
                        (nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d)(
                            w, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=dtype),
                        nn.ReLU(inplace=True),
                    )
                )
                self.enc_blocks.append(
                    nn.Sequential(*[_cbr(dims, w, w, dtype) for _ in range(3)])
                )

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        n_dec_convs = 2 if spec.family == "unet2d" else 3
        for lvl in range(d, 0, -1):
            below = spec.width(lvl - 1)
            skip = fused if lvl - 1 == 0 else below
            self.ups.append(
                deconv_cls(spec.width(lvl), below, kernel_size=2, stride=2, dtype=dtype)
            )
            blocks = [_cbr(dims, below + skip, below, dtype)]
            blocks += [_cbr(dims, below, below, dtype) for _ in range(n_dec_convs - 1)]
            self.dec_blocks.append(nn.Sequential(*blocks))

        if spec.family == "vnet3d":
            cin0 = fused if d == 0 else b
            self.out_block = nn.Sequential(
                _cbr(dims, cin0, b, dtype), _cbr(dims, b, b, dtype),
                _cbr(dims, b, b, dtype),
            )
        else:
            self.out_block = None
        self.classifier = conv_cls(b, spec.classes, kernel_size=1, dtype=dtype)

    def compute_patterns(self, coords: torch.Tensor) -> torch.Tensor:
        if self.pattern_net is None:
            raise RuntimeError("network was built without a pattern branch")
        return self.pattern_net(coords)

    def forward(self, x: torch.Tensor, coords: torch.Tensor | None = None) -> torch.Tensor:
        spec = self.spec
        expect_ndim = 2 + spec.spatial_dims
        if x.ndim != expect_ndim:
            raise ValueError(
                f"{spec.family} expects {expect_ndim}D input (B, C, ...), got shape {tuple(x.shape)}"
            )
        period = 2 ** spec.depth_level
        for s in x.shape[2:]:
            if s % period != 0:
                raise ValueError(
                    f"spatial size {tuple(x.shape[2:])} not divisible by {period}"
                )
        if spec.use_cppn:
            if coords is None:
                raise ValueError("spec.use_cppn is set but no coordinate channels given")
            if coords.shape[0] != x.shape[0] or coords.shape[2:] != x.shape[2:]:
                raise ValueError(
                    f"coordinate channels {tuple(coords.shape)} misaligned with "
                    f"input {tuple(x.shape)}"
                )

        h = self.enc0(x)
        if spec.use_cppn:
            h = torch.cat([h, self.pattern_net(coords)], dim=1)
        skips = [h]
        for down, block in zip(self.downs, self.enc_blocks):
            h = block(down(h))
            skips.append(h)
        for i, (up, block) in enumerate(zip(self.ups, self.dec_blocks)):
            h = block(torch.cat([up(h), skips[-(i + 2)]], dim=1))
        if self.out_block is not None:
            h = self.out_block(h)
        return torch.softmax(self.classifier(h), dim=1)


def _init_parameters(module: nn.Module, seed: int) -> None:
    # Uniform Xavier kernels, every bias at 0.01, BN scale 1 / shift 0.01,
    # fresh running statistics.  Registration order makes this deterministic.
    gen = torch.Generator().manual_seed(seed)
    conv_types = (
        nn.Conv1d, nn.Conv2d, nn.Conv3d,
        nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d,
    )
    bn_types = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, conv_types):
                fan_in, fan_out = nn.init._calculate_fan_in_and_fan_out(m.weight)
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                noise = torch.empty_like(m.weight, device="cpu")
                noise.uniform_(-bound, bound, generator=gen)
                m.weight.copy_(noise)
                m.bias.fill_(0.01)
            elif isinstance(m, bn_types):
                m.weight.fill_(1.0)
                m.bias.fill_(0.01)
                m.running_mean.zero_()
                m.running_var.fill_(1.0)
                m.num_batches_tracked.zero_()


def build(spec: NetworkSpec, seed: int = 0, dtype=torch.float32) -> Network:
    """Construct and initialize a network; deterministic for a fixed seed."""
    net = Network(spec, dtype=dtype)
    _init_parameters(net, seed)
    net.eval()
    return net


def parameter_count(net_or_spec: Network | NetworkSpec) -> int:
    if isinstance(net_or_spec, NetworkSpec):
        net_or_spec = Network(net_or_spec)
    return sum(p.numel() for p in net_or_spec.parameters())


def _locate_nonfinite(net: Network, x, coords):
    names = []

    def hook(module, args, output):
        if isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
            names.append(module._vs_name)

    handles = []
    for name, m in net.named_modules():
        if len(list(m.children())) == 0 and name:
            m._vs_name = name
            handles.append(m.register_forward_hook(hook))
    try:
        with torch.no_grad():
            net(x, coords)
    finally:
        for h in handles:
            h.remove()
    return names[0] if names else "<unknown>"


def forward(
    net: Network,
    batch,
    coords=None,
    mode: str = "eval",
    check_finite: bool = True,
):
    """Run a batch through the network and return class probabilities.

    numpy in, numpy out (torch tensors pass straight through and keep the
    autograd graph in train mode).  Softmax guarantees the two channels sum
    to 1 at every location.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    is_numpy = not isinstance(batch, torch.Tensor)
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(batch), dtype=dtype) if is_numpy else batch
    c = None
    if coords is not None:
        c = torch.as_tensor(np.asarray(coords), dtype=dtype) if not isinstance(
            coords, torch.Tensor) else coords
    net.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        probs = net(x, c)
    if mode == "train":
        net.eval()
    if check_finite and not bool(torch.isfinite(probs).all()):
        layer = _locate_nonfinite(net, x.detach(), None if c is None else c.detach())
        raise FloatingPointError(f"non-finite activations first seen at layer {layer!r}")
    if is_numpy:
        return probs.detach().cpu().numpy()
    return probs


def predict_labels(probabilities: np.ndarray, channel_axis: int = 0) -> np.ndarray:
    """Argmax over the 2 class channels; ties go to background (0).

    ``channel_axis`` locates the class axis (0 for a single (2, *spatial)
    field, 1 for a batched (B, 2, *spatial) stack); the returned uint8
    labels drop that axis.
    """
    p = np.asarray(probabilities)
    if p.shape[channel_axis] != 2:
        raise ValueError(f"expected a 2-channel probability field, got {p.shape}")
    fg = np.take(p, 1, axis=channel_axis)
    bg = np.take(p, 0, axis=channel_axis)
    return (fg > bg).astype(np.uint8)
