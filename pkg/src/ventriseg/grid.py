"""Voxel containers and the preprocessing chain.

Volumes are 3D scalar grids stored in ``(z, y, x)`` = (slice, row, column)
order with coronal slices indexed along ``z``.  The ``y`` axis is the
left/right symmetry axis used by the coordinate channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

FORMAT_MAGIC = "ventriseg-voxel-container v1"


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with physical voxel spacing in mm.

    data: float array of shape (Z, Y, X), all values finite.
    spacing: mm per voxel along (z, y, x), strictly positive.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """A binary segmentation aligned with a :class:`Volume`.

    Values are exactly 0 (background) or 1 (target structure).
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {data.shape}")
        vals = np.unique(data)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"label map values must be exactly 0/1, found {vals[:10]}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class Case:
    """One dataset entry: an image, its reference labels and a class tag."""

    case_id: str
    tag: str  # "normal" | "dilated"
    volume: Volume
    labels: LabelMap


@dataclass
class DatasetSplit:
    """Disjoint train/validation/test case id lists plus per-case class tags."""

    training: list[str]
    validation: list[str]
    test: list[str]
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        groups = [set(self.training), set(self.validation), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                overlap = groups[i] & groups[j]
                if overlap:
                    raise ValueError(f"split lists overlap: {sorted(overlap)}")
        for cid in self.all_cases():
            if self.tags.get(cid) not in ("normal", "dilated"):
                raise ValueError(f"case {cid!r} lacks a valid class tag")

    def all_cases(self) -> list[str]:
        return list(self.training) + list(self.validation) + list(self.test)

    def to_json(self) -> str:
        return json.dumps(
            {
                "training": list(self.training),
                "validation": list(self.validation),
                "test": list(self.test),
                "tags": dict(self.tags),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(d["training"], d["validation"], d["test"], d["tags"])


def voxel_volume(spacing) -> float:
    """Physical volume of one voxel in mm^3 (product of per-axis spacings)."""
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    out = 1.0
    for s in spacing:
        out *= s
    return out


def _center_crop_or_pad(data: np.ndarray, target_side: int, pad_value=0):
    """Center-crop each axis to ``target_side``, zero-padding where smaller."""
    out = data
    for axis in range(3):
        cur = out.shape[axis]
        if cur > target_side:
            start = (cur - target_side) // 2
            sl = [slice(None)] * 3
            sl[axis] = slice(start, start + target_side)
            out = out[tuple(sl)]
        elif cur < target_side:
            before = (target_side - cur) // 2
            after = target_side - cur - before
            pad = [(0, 0)] * 3
            pad[axis] = (before, after)
            out = np.pad(out, pad, mode="constant", constant_values=pad_value)
    return out


def standardize(data: np.ndarray, per_slice: bool = False) -> np.ndarray:
    """Shift/scale to zero mean and unit variance (population variance).

    With ``per_slice`` the statistics are computed independently for each
    coronal (z) slice.  A constant volume or slice has no defined scale and
    raises ``ValueError``.
    """
    data = np.asarray(data, dtype=np.float64)
    if per_slice:
        out = np.empty_like(data)
        for z in range(data.shape[0]):
            sl = data[z]
            std = sl.std()
            if std == 0:
                raise ValueError(f"degenerate standardization: slice {z} is constant")
            out[z] = (sl - sl.mean()) / std
        return out
    std = data.std()
    if std == 0:
        raise ValueError("degenerate standardization: volume is constant")
    return (data - data.mean()) / std


def preprocess(
    raw: Volume,
    raw_labels: LabelMap | None = None,
    target_side: int = 96,
    scale_factor: int = 2,
    per_slice: bool = False,
) -> tuple[Volume, LabelMap | None]:
    """Downscale, center-crop to a cube, and standardize a volume.

    The image is downscaled by ``scale_factor`` with cubic interpolation
    (labels with nearest-neighbor, so they stay binary) and the spacing is
    multiplied accordingly.  The result is center-cropped to
    ``target_side`` per axis, standardized, and finally zero-padded where
    the input was smaller than the target.  Standardization statistics are
    taken over the pre-padding extent, so padded voxels sit exactly at the
    mean intensity (0).

    ``scale_factor=1`` disables resampling.
    """
    if target_side < 8:
        raise ValueError(f"target_side must be >= 8, got {target_side}")
    if scale_factor < 1:
        raise ValueError(f"scale_factor must be >= 1, got {scale_factor}")

    img = np.asarray(raw.data, dtype=np.float64)
    lab = None if raw_labels is None else raw_labels.data
    if lab is not None and lab.shape != img.shape:
        raise ValueError(f"label shape {lab.shape} != volume shape {img.shape}")

    if scale_factor > 1:
        zoom = 1.0 / scale_factor
        img = ndimage.zoom(img, zoom, order=3, mode="grid-constant", grid_mode=True)
        if lab is not None:
            lab = ndimage.zoom(lab, zoom, order=0, mode="grid-constant", grid_mode=True)
    spacing = tuple(s * scale_factor for s in raw.spacing)

    img = _center_crop_or_pad_then_standardize(img, target_side, per_slice)
    out_vol = Volume(img, spacing)

    out_lab = None
    if lab is not None:
        lab = _center_crop_or_pad(lab, target_side, pad_value=0)
        out_lab = LabelMap(lab, spacing)
    return out_vol, out_lab


def _center_crop_or_pad_then_standardize(img, target_side, per_slice):
    # Crop first, standardize the retained content, then pad with the mean.
    cropped = img
    for axis in range(3):
        cur = cropped.shape[axis]
        if cur > target_side:
            start = (cur - target_side) // 2
            sl = [slice(None)] * 3
            sl[axis] = slice(start, start + target_side)
            cropped = cropped[tuple(sl)]
    cropped = standardize(cropped, per_slice=per_slice)
    return _center_crop_or_pad(cropped, target_side, pad_value=0.0)


# ---------------------------------------------------------------------------
# Persistence: a small self-describing container (text header + raw payload)
# ---------------------------------------------------------------------------

def _save_array(path, data: np.ndarray, spacing, kind: str):
    data = np.ascontiguousarray(data)
    header = {
        "shape": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": data.dtype.str,  # e.g. "<f4"
        "kind": kind,
    }
    with open(path, "wb") as f:
        f.write((FORMAT_MAGIC + "\n").encode("ascii"))
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        f.write(data.tobytes())


def _load_array(path):
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").rstrip("\n")
        if magic != FORMAT_MAGIC:
            raise ValueError(f"{path}: not a voxel container (magic {magic!r})")
        header = json.loads(f.readline().decode("ascii"))
        payload = f.read()
    data = np.frombuffer(payload, dtype=np.dtype(header["dtype"]))
    data = data.reshape(header["shape"]).copy()
    return data, tuple(header["spacing"]), header["kind"]


def save_volume(path, volume: Volume) -> None:
    _save_array(path, volume.data.astype("<f4"), volume.spacing, "volume")


def load_volume(path) -> Volume:
    data, spacing, kind = _load_array(path)
    if kind != "volume":
        raise ValueError(f"{path}: container holds {kind!r}, expected volume")
    return Volume(data.astype(np.float32), spacing)


def save_labels(path, labels: LabelMap) -> None:
    _save_array(path, labels.data.astype("|u1"), labels.spacing, "labels")


def load_labels(path) -> LabelMap:
    data, spacing, kind = _load_array(path)
    if kind != "labels":
        raise ValueError(f"{path}: container holds {kind!r}, expected labels")
    return LabelMap(data, spacing)


def to_nifti(path, obj: Volume | LabelMap) -> None:
    """Optional adapter: write a NIfTI file when nibabel is installed."""
    try:
        import nibabel as nib
    except ImportError as e:  # pragma: no cover - depends on environment
        raise ImportError("NIfTI export requires the optional 'nibabel' package") from e
    affine = np.diag(list(obj.spacing) + [1.0])
    nib.save(nib.Nifti1Image(np.asarray(obj.data), affine), str(path))


def from_nifti(path, kind: str = "volume") -> Volume | LabelMap:
    """Optional adapter: read a NIfTI file when nibabel is installed."""
    try:
        import nibabel as nib
    except ImportError as e:  # pragma: no cover - depends on environment
        raise ImportError("NIfTI import requires the optional 'nibabel' package") from e
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    if kind == "labels":
        return LabelMap(data, spacing)
    return Volume(data.astype(np.float32), spacing)


def case_paths(directory, case_id: str) -> tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{case_id}.vol", directory / f"{case_id}.seg"


def save_case(directory, case: Case) -> None:
    vp, lp = case_paths(directory, case.case_id)
    Path(directory).mkdir(parents=True, exist_ok=True)
    save_volume(vp, case.volume)
    save_labels(lp, case.labels)


def load_case(directory, case_id: str, tag: str) -> Case:
    vp, lp = case_paths(directory, case_id)
    return Case(case_id, tag, load_volume(vp), load_labels(lp))
