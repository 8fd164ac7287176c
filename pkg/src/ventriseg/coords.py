"""Normalized coordinate fields and the 9-channel pattern-network input.

For a cube of side N and 1-based index i along an axis, the normalized
coordinate is (2i - (N+1)) / (N-1), spanning [-1, 1].  Along the y axis the
absolute value is taken, so the y coordinate spans [0, 1] and is mirror
symmetric about the mid-plane; this encodes left/right hemisphere symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: channel layout of the 9-channel input: squares, pairwise products, linear
CHANNEL_NAMES = ("xx", "yy", "zz", "xy", "xz", "yz", "x", "y", "z")


@dataclass(frozen=True)
class CoordinateMaps:
    """The three normalized coordinate fields of a volume.

    xc, zc take values in [-1, 1]; yc in [0, 1] (mirror symmetric along
    axis 1).  All three share the volume's (Z, Y, X) shape.
    """

    xc: np.ndarray
    yc: np.ndarray
    zc: np.ndarray

    def __post_init__(self):
        if not (self.xc.shape == self.yc.shape == self.zc.shape):
            raise ValueError("coordinate fields must share one shape")

    @property
    def shape(self):
        return self.xc.shape


@dataclass(frozen=True)
class CppnInput:
    """Stack of the 9 coordinate-derived channels, shape (9, Z, Y, X)."""

    channels: np.ndarray

    def __post_init__(self):
        if self.channels.ndim != 4 or self.channels.shape[0] != 9:
            raise ValueError(f"expected (9, Z, Y, X), got {self.channels.shape}")

    @property
    def spatial_shape(self):
        return self.channels.shape[1:]


def axis_coordinates(n: int, absolute: bool = False) -> np.ndarray:
    """1D normalized coordinates for an axis of length n (n >= 2)."""
    if n < 2:
        raise ValueError(f"axis length must be >= 2, got {n}")
    i = np.arange(1, n + 1, dtype=np.float64)
    c = (2.0 * i - (n + 1)) / (n - 1)
    return np.abs(c) if absolute else c


def normalized_coords(side: int, abs_axis: int = 1) -> CoordinateMaps:
    """Coordinate maps for a cube of the given side.

    ``abs_axis`` selects which array axis carries the mirrored coordinate
    (default 1, the y/row axis).
    """
    if abs_axis not in (0, 1, 2):
        raise ValueError(f"abs_axis must be 0, 1 or 2, got {abs_axis}")
    lin = axis_coordinates(side)
    mirrored = np.abs(lin)
    # Array axes are (z, y, x); coordinate k varies along its own axis only.
    per_axis = [lin, lin, lin]
    per_axis[abs_axis] = mirrored
    zc = np.broadcast_to(per_axis[0][:, None, None], (side, side, side))
    yc = np.broadcast_to(per_axis[1][None, :, None], (side, side, side))
    xc = np.broadcast_to(per_axis[2][None, None, :], (side, side, side))
    return CoordinateMaps(xc=np.ascontiguousarray(xc),
                          yc=np.ascontiguousarray(yc),
                          zc=np.ascontiguousarray(zc))


def cppn_input(maps: CoordinateMaps) -> CppnInput:
    """Stack squares, pairwise products and linear terms of the coordinates."""
    x, y, z = maps.xc, maps.yc, maps.zc
    channels = np.stack(
        [x * x, y * y, z * z, x * y, x * z, y * z, x, y, z], axis=0
    ).astype(np.float32)
    return CppnInput(channels)


def crop_coords(obj: CoordinateMaps | CppnInput, origin, shape):
    """Restrict fields to a window; no re-normalization is applied.

    ``origin`` and ``shape`` are (z, y, x) tuples in voxels.
    """
    origin = tuple(int(v) for v in origin)
    shape = tuple(int(v) for v in shape)
    if len(origin) != 3 or len(shape) != 3:
        raise ValueError("origin and shape must be (z, y, x) triples")
    if isinstance(obj, CppnInput):
        extent = obj.spatial_shape
    else:
        extent = obj.shape
    for o, s, e in zip(origin, shape, extent):
        if o < 0 or s < 1 or o + s > e:
            raise ValueError(
                f"crop window origin={origin} shape={shape} exceeds extent {extent}"
            )
    sl = tuple(slice(o, o + s) for o, s in zip(origin, shape))
    if isinstance(obj, CppnInput):
        return CppnInput(obj.channels[(slice(None),) + sl])
    return CoordinateMaps(xc=obj.xc[sl], yc=obj.yc[sl], zc=obj.zc[sl])


_INPUT_CACHE: dict[tuple[int, int], CppnInput] = {}


def cached_cppn_input(side: int, abs_axis: int = 1) -> CppnInput:
    """Memoized full-cube 9-channel input (training/inference hot path)."""
    key = (side, abs_axis)
    if key not in _INPUT_CACHE:
        _INPUT_CACHE[key] = cppn_input(normalized_coords(side, abs_axis))
    return _INPUT_CACHE[key]
