"""Whole-volume segmentation.

2D networks segment coronal slices independently.  3D networks cover the
volume with overlapping windows along z (full extent in-plane), sum the
per-class probabilities over every covering window and take the per-voxel
argmax (ties go to background).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import coords as coords_mod
from .grid import LabelMap, Volume
from .nets import Network, predict_labels


@dataclass(frozen=True)
class WindowPlan:
    """Window extent, stride and the list of z origins covering [0, Z-extent]."""

    extent: int
    stride: int
    origins: tuple[int, ...]

    @property
    def overlap(self) -> float:
        return 1.0 - self.stride / self.extent

    @property
    def slice_equivalents(self) -> int:
        return self.extent * len(self.origins)


def plan_windows(depth: int, extent: int, overlap: float) -> WindowPlan:
    """Plan overlapping windows along an axis of the given depth.

    The stride ``extent * (1 - overlap)`` must be a positive integer that
    divides ``depth - extent``; otherwise the error names the padding that
    would make the plan valid.
    """
    if extent > depth:
        raise ValueError(f"window extent {extent} exceeds volume depth {depth}")
    stride_f = extent * (1.0 - overlap)
    stride = int(round(stride_f))
    if stride <= 0 or abs(stride_f - stride) > 1e-9:
        raise ValueError(
            f"extent {extent} with overlap {overlap} gives non-integral stride {stride_f}"
        )
    remainder = (depth - extent) % stride
    if remainder != 0:
        pad = stride - remainder
        raise ValueError(
            f"windows of extent {extent}, stride {stride} cannot cover depth "
            f"{depth}; pad the volume by {pad} slices (to {depth + pad})"
        )
    origins = tuple(range(0, depth - extent + 1, stride))
    return WindowPlan(extent=extent, stride=stride, origins=origins)


def _to_tensor(arr, net: Network) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(np.asarray(arr), dtype=dtype)


def segment_2d(net: Network, volume: Volume, cppn_channels=None,
               batch_slices: int = 16):
    """Slice-wise inference; returns ``(probabilities, LabelMap)``.

    ``probabilities`` has shape (2, Z, Y, X).  When the network has a
    pattern branch, ``cppn_channels`` may supply the (9, Z, Y, X) field;
    it is derived from the volume side otherwise.
    """
    if net.spec.family != "unet2d":
        raise ValueError(f"segment_2d needs a 2D network, got {net.spec.family}")
    z_dim, y_dim, x_dim = volume.shape
    if net.spec.use_cppn and cppn_channels is None:
        if not (z_dim == y_dim == x_dim):
            raise ValueError(
                "non-cubic volume: pass explicit coordinate channels")
        cppn_channels = coords_mod.cached_cppn_input(z_dim).channels
    if cppn_channels is not None and cppn_channels.shape[1:] != volume.shape:
        raise ValueError(
            f"coordinate channels {cppn_channels.shape} misaligned with "
            f"volume {volume.shape}")

    net.eval()
    probs = np.empty((2, z_dim, y_dim, x_dim), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, z_dim, batch_slices):
            stop = min(start + batch_slices, z_dim)
            x = _to_tensor(volume.data[start:stop, None], net)
            c = None
            if net.spec.use_cppn:
                c = _to_tensor(
                    np.moveaxis(cppn_channels[:, start:stop], 0, 1), net)
            out = net(x, c)  # (B, 2, Y, X)
            probs[:, start:stop] = np.moveaxis(out.cpu().numpy(), 0, 1)
    labels = LabelMap(predict_labels(probs), volume.spacing)
    return probs, labels


def segment_3d(net: Network, volume: Volume, cppn_channels=None,
               plan: WindowPlan | None = None, extent: int = 64,
               overlap: float = 0.75):
    """Overlapping-window inference; returns ``(accumulated, LabelMap)``.

    ``accumulated`` holds the per-class probability sums over all covering
    windows, shape (2, Z, Y, X).  Without an explicit plan the volume is
    zero-padded at the far z end to the next coverable depth and the
    padding is cropped from the outputs.
    """
    if net.spec.family != "vnet3d":
        raise ValueError(f"segment_3d needs a 3D network, got {net.spec.family}")
    z_dim, y_dim, x_dim = volume.shape
    data = volume.data

    if plan is None:
        stride = int(round(extent * (1.0 - overlap)))
        padded_z = z_dim
        if z_dim < extent:
            padded_z = extent
        elif (z_dim - extent) % stride != 0:
            padded_z = z_dim + stride - (z_dim - extent) % stride
        plan = plan_windows(padded_z, extent, overlap)
    else:
        padded_z = plan.origins[-1] + plan.extent
        if padded_z < z_dim:
            raise ValueError(
                f"window plan covers only {padded_z} of {z_dim} slices")

    if net.spec.use_cppn and cppn_channels is None:
        if not (z_dim == y_dim == x_dim):
            raise ValueError(
                "non-cubic volume: pass explicit coordinate channels")
        cppn_channels = coords_mod.cached_cppn_input(z_dim).channels
    if cppn_channels is not None and cppn_channels.shape[1:] != volume.shape:
        raise ValueError(
            f"coordinate channels {cppn_channels.shape} misaligned with "
            f"volume {volume.shape}")

    if padded_z > z_dim:
        pad = padded_z - z_dim
        data = np.pad(data, ((0, pad), (0, 0), (0, 0)))
        if cppn_channels is not None:
            # Padded slices reuse the edge coordinates; they are cropped out.
            cppn_channels = np.pad(cppn_channels, ((0, 0), (0, pad), (0, 0), (0, 0)),
                                   mode="edge")

    net.eval()
    acc = np.zeros((2, padded_z, y_dim, x_dim), dtype=np.float64)
    with torch.no_grad():
        for origin in plan.origins:
            window = data[origin:origin + plan.extent]
            x = _to_tensor(window[None, None], net)
            c = None
            if net.spec.use_cppn:
                c = _to_tensor(
                    cppn_channels[None, :, origin:origin + plan.extent], net)
            out = net(x, c)[0].cpu().numpy()  # (2, extent, Y, X)
            acc[:, origin:origin + plan.extent] += out
    acc = acc[:, :z_dim]
    labels = LabelMap(predict_labels(acc), volume.spacing)
    return acc, labels


def timed_segmentation(net: Network, volume: Volume, **kwargs):
    """Segment a volume and report the wall time.

    Returns ``(probabilities, labels, seconds)``; the timing carries no
    accuracy contract, it is recorded for reporting only.
    """
    t0 = time.perf_counter()
    if net.spec.family == "unet2d":
        probs, labels = segment_2d(net, volume, **kwargs)
    else:
        probs, labels = segment_3d(net, volume, **kwargs)
    return probs, labels, time.perf_counter() - t0
