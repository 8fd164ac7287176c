"""Synthetic speckle-textured volumes with ventricle-like targets.

Each phantom contains a mirror-symmetric pair of lateral lobes joined by a
thin midline bridge, with thin horn extensions, a bright plexus-like core
inside a dark CSF-like body, plus two decoy structures that mimic the
target's local appearance at other locations: a bright outer shell (skull
look-alike) and a dark midline slab (CSP look-alike).  Ground-truth labels
are exact by construction; decoys never intersect the target.

This is a stand-in for clinical data: it reproduces the class volume
statistics and the location-versus-appearance ambiguity, not acoustics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Case, DatasetSplit, LabelMap, Volume, save_case

CLASS_VOLUME_CM3 = {"normal": 2.7, "dilated": 9.1}
#: per-case draw ranges; disjoint so dilated volumes always exceed normal ones
CLASS_VOLUME_RANGES = {"normal": (2.0, 3.4), "dilated": (7.5, 11.0)}

DEFAULT_INTENSITIES = {
    "background": 0.45,
    "csf": 0.10,     # hypoechoic target body, shared by the CSP decoy
    "core": 0.85,    # hyperechoic plexus-like core, shared by the skull decoy
}


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, intensity and noise recipe for one synthetic case."""

    side: int = 96
    spacing: float = 0.6
    tag: str = "normal"
    target_volume_cm3: float | None = None  # class default when None
    with_decoys: bool = True
    noise_amplitude: float = 0.5
    noise_correlation_vox: float = 1.5
    smooth_sigma: float = 0.6
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    seed: int = 0

    def __post_init__(self):
        if self.tag not in CLASS_VOLUME_CM3:
            raise ValueError(f"tag must be 'normal' or 'dilated', got {self.tag!r}")
        if self.side < 16:
            raise ValueError(f"side must be >= 16, got {self.side}")

    @property
    def target_cm3(self) -> float:
        if self.target_volume_cm3 is not None:
            return self.target_volume_cm3
        return CLASS_VOLUME_CM3[self.tag]


def _ellipsoid(zz, yy, xx, center, semi) -> np.ndarray:
    cz, cy, cx = center
    az, ay, ax = semi
    return (((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2
            + ((xx - cx) / ax) ** 2) <= 1.0


def _target_mask(spec: PhantomSpec, rho: float, grids):
    """Lobes + bridge + horns for a size parameter rho (voxels)."""
    zz, yy, xx = grids
    s = spec.side
    cz = cy = cx = (s - 1) / 2.0
    lobe_semi = (1.15 * rho, 0.80 * rho, 1.10 * rho)
    dy = 1.05 * lobe_semi[1]

    mask = np.zeros((s, s, s), dtype=bool)
    cores = np.zeros_like(mask)
    for side_sign in (-1.0, 1.0):
        lc = (cz, cy + side_sign * dy, cx)
        mask |= _ellipsoid(zz, yy, xx, lc, lobe_semi)
        cores |= _ellipsoid(
            zz, yy, xx,
            (cz + 0.20 * lobe_semi[0], lc[1], cx),
            (0.45 * lobe_semi[0], 0.40 * lobe_semi[1], 0.45 * lobe_semi[2]),
        )
        horn_c = (cz + 0.90 * lobe_semi[0],
                  cy + side_sign * dy * 1.10,
                  cx - 0.40 * lobe_semi[2])
        mask |= _ellipsoid(zz, yy, xx, horn_c,
                           (1.00 * rho, 0.25 * rho, 0.35 * rho))
    bridge = ((np.abs(zz - cz) <= 0.18 * rho)
              & (np.abs(xx - cx) <= 0.22 * rho)
              & (np.abs(yy - cy) <= dy))
    mask |= bridge
    cores &= mask
    extent = max(dy + lobe_semi[1], 0.90 * lobe_semi[0] + 1.00 * rho)
    return mask, cores, extent


def _calibrate_rho(spec: PhantomSpec, grids) -> float:
    vox_mm3 = spec.spacing ** 3
    target_count = spec.target_cm3 * 1000.0 / vox_mm3
    # lobes carry roughly 3/4 of the realized volume; start from that guess
    rho = (0.375 * target_count / (4.0 / 3.0 * np.pi * 1.15 * 0.80 * 1.10)) ** (1.0 / 3.0)
    for _ in range(12):
        mask, _, _ = _target_mask(spec, rho, grids)
        realized = int(mask.sum())
        if realized == 0:
            rho *= 1.5
            continue
        ratio = target_count / realized
        if abs(ratio - 1.0) < 0.02:
            break
        rho *= ratio ** (1.0 / 3.0)
    return rho


def generate_case(spec: PhantomSpec):
    """Build one phantom; returns ``(Volume, LabelMap, tag)``.

    Deterministic for a fixed spec (bitwise).  The label equals the
    generating target geometry exactly.
    """
    s = spec.side
    idx = np.arange(s, dtype=np.float64)
    zz = idx[:, None, None]
    yy = idx[None, :, None]
    xx = idx[None, None, :]
    grids = (zz, yy, xx)
    center = (s - 1) / 2.0

    rho = _calibrate_rho(spec, grids)
    target, cores, extent = _target_mask(spec, rho, grids)

    vox_mm3 = spec.spacing ** 3
    realized_cm3 = int(target.sum()) * vox_mm3 / 1000.0
    if abs(realized_cm3 - spec.target_cm3) > 0.10 * spec.target_cm3:
        raise ValueError(
            f"infeasible geometry: target {spec.target_cm3:.2f} cm3 not reachable "
            f"at side {s}, spacing {spec.spacing} (realized {realized_cm3:.2f} cm3)")
    shell_inner = 0.44 * s
    if extent >= shell_inner - 2.0:
        raise ValueError(
            f"infeasible geometry: structure extent {extent:.1f} voxels does not "
            f"fit inside side {s}")

    rng = np.random.default_rng(spec.seed)
    inten = dict(spec.intensities)
    jitter = {k: float(rng.normal(0.0, 0.02)) for k in ("csf", "core")}

    template = np.full((s, s, s), inten["background"], dtype=np.float64)
    if spec.with_decoys:
        shell = (_ellipsoid(zz, yy, xx, (center,) * 3,
                            (0.46 * s, 0.44 * s, 0.45 * s))
                 & ~_ellipsoid(zz, yy, xx, (center,) * 3,
                               (0.46 * s - 2.5, 0.44 * s - 2.5, 0.45 * s - 2.5)))
        csp = _ellipsoid(
            zz, yy, xx,
            (center, center, center - 0.26 * s),
            (0.85 * 1.15 * rho, 0.70 * 0.80 * rho, 0.55 * 1.10 * rho))
        shell &= ~target
        csp &= ~target
        template[shell] = inten["core"] + jitter["core"]
        template[csp] = inten["csf"] + jitter["csf"]
    template[target] = inten["csf"] + jitter["csf"]
    template[cores] = inten["core"] + jitter["core"]

    if spec.noise_amplitude > 0:
        speckle = rng.rayleigh(scale=1.0, size=(s, s, s))
        speckle = ndimage.gaussian_filter(speckle, spec.noise_correlation_vox)
        speckle /= speckle.mean()
        image = template * (1.0 + spec.noise_amplitude * (speckle - 1.0))
        image = ndimage.gaussian_filter(image, spec.smooth_sigma)
    else:
        image = template

    spacing = (spec.spacing,) * 3
    return (Volume(image.astype(np.float32), spacing),
            LabelMap(target.astype(np.uint8), spacing),
            spec.tag)


def table1_counts() -> dict:
    """The reference 13/5/7 split profile (9+4 / 3+2 / 5+2)."""
    return {
        "training": {"normal": 9, "dilated": 4},
        "validation": {"normal": 3, "dilated": 2},
        "test": {"normal": 5, "dilated": 2},
    }


def small_counts(train_normal=6, train_dilated=2, val_normal=1, val_dilated=1,
                 test_normal=3, test_dilated=1) -> dict:
    """A reduced desk profile keeping both classes in every split."""
    return {
        "training": {"normal": train_normal, "dilated": train_dilated},
        "validation": {"normal": val_normal, "dilated": val_dilated},
        "test": {"normal": test_normal, "dilated": test_dilated},
    }


def generate_dataset(counts: dict, side: int = 96, spacing: float = 0.6,
                     seed: int = 0, out_dir=None, with_decoys: bool = True,
                     noise_amplitude: float = 0.5):
    """Generate a full split of phantoms; returns ``(cases, DatasetSplit)``.

    Per-case target volumes are drawn uniformly from the class ranges
    (disjoint between classes).  With ``out_dir`` every case is written in
    the voxel container format together with a ``split.json`` manifest.
    """
    rng = np.random.default_rng(seed)
    cases: list[Case] = []
    split_lists = {"training": [], "validation": [], "test": []}
    tags: dict[str, str] = {}
    for split_name in ("training", "validation", "test"):
        for tag in ("normal", "dilated"):
            n = int(counts.get(split_name, {}).get(tag, 0))
            for i in range(n):
                case_id = f"{split_name[:5]}_{tag}_{i:02d}"
                lo, hi = CLASS_VOLUME_RANGES[tag]
                target = float(rng.uniform(lo, hi))
                case_seed = int(rng.integers(0, 2 ** 31 - 1))
                spec = PhantomSpec(
                    side=side, spacing=spacing, tag=tag,
                    target_volume_cm3=target, with_decoys=with_decoys,
                    noise_amplitude=noise_amplitude, seed=case_seed)
                vol, lab, _ = generate_case(spec)
                case = Case(case_id, tag, vol, lab)
                cases.append(case)
                split_lists[split_name].append(case_id)
                tags[case_id] = tag
                if out_dir is not None:
                    save_case(out_dir, case)
    split = DatasetSplit(split_lists["training"], split_lists["validation"],
                         split_lists["test"], tags)
    if out_dir is not None:
        from pathlib import Path

        (Path(out_dir) / "split.json").write_text(split.to_json())
    return cases, split
