"""Region-targeted noise, graying ablations, and mask-guided swaps.

A corrupted foreground sample is clip(x + n * m) and a corrupted background
sample is clip(x + n * (1 - m)), where n is drawn once per (sample, level,
trial) and shared by both regions so the comparison is paired. Pixels
outside the targeted region are bit-identical to the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from regionprobe.dataset import WHOLE_OBJECT_ATTRIBUTES, Sample
from regionprobe.imageops import resize_bilinear, resize_mask_nearest

REGIONS = ("foreground", "background", "full")

GRAY_LEVEL = 0.5


class ShapeMismatchError(ValueError):
    pass


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption configuration for a sweep.

    kind: "linf_gaussian" (levels are Gaussian sigmas in [0,1]) or
    "l2_normalized" (levels are target L2 norms over the corrupted region).
    """

    kind: str
    levels: tuple[float, ...]
    regions: tuple[str, ...] = ("foreground", "background")
    trials: int = 10
    base_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linf_gaussian", "l2_normalized"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.levels:
            raise ValueError("levels must be nonempty")
        if any(lv < 0 for lv in self.levels):
            raise ValueError("levels must be nonnegative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for r in self.regions:
            if r not in REGIONS:
                raise ValueError(f"unknown region {r!r}")


# Standard sweep levels: seven sigmas from 30/255 to 210/255, and eight
# L2 targets from 25 to 200.
DEFAULT_LINF_LEVELS = tuple(s / 255.0 for s in (30, 60, 90, 120, 150, 180, 210))
DEFAULT_L2_LEVELS = tuple(float(t) for t in (25, 50, 75, 100, 125, 150, 175, 200))


# --------------------------------------------------------------------------
# Deterministic per-trial seeding
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    """One splitmix64 step: the 64-bit mixer used to derive trial seeds."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def trial_seed(base_seed: int, sample_id: str, level_index: int, trial_index: int) -> int:
    """64-bit seed for one (sample, level, trial), order-independent.

    Chains splitmix64 over the base seed, an FNV-1a hash of the sample id,
    and the two indices, so any trial is reproducible in isolation.
    """
    z = base_seed & _MASK64
    z = _splitmix64(z ^ _fnv1a64(sample_id.encode("utf-8")))
    z = _splitmix64(z ^ (level_index & _MASK64))
    z = _splitmix64(z ^ (trial_index & _MASK64))
    return z


# --------------------------------------------------------------------------
# Noise construction and application
# --------------------------------------------------------------------------


def gaussian_noise(shape: tuple[int, ...], sigma: float, seed: int) -> np.ndarray:
    """I.i.d. zero-mean Gaussian noise with standard deviation sigma."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.zeros(shape, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, sigma, size=shape)


def _region_mask(m: np.ndarray, region: str, shape: tuple[int, ...]) -> np.ndarray:
    """Pixel selector for a region, broadcast to the image shape."""
    if region == "full":
        return np.ones(shape, dtype=np.float64)
    if m.shape != shape[:2]:
        raise ShapeMismatchError(f"mask shape {m.shape} does not match image {shape[:2]}")
    sel = m if region == "foreground" else 1.0 - m
    if len(shape) == 3:
        sel = sel[:, :, None] * np.ones(shape[2])
    return sel


def apply_region_noise(
    x: np.ndarray, m: np.ndarray, n: np.ndarray, region: str = "foreground"
) -> np.ndarray:
    """clip(x + n * selector) where selector picks the targeted region.

    Pixels outside the region are copied bit-identically from x; the output
    is clipped to [0, 1].
    """
    if region not in REGIONS:
        raise ValueError(f"unknown region {region!r}")
    if n.shape != x.shape:
        raise ShapeMismatchError(f"noise shape {n.shape} does not match image {x.shape}")
    sel = _region_mask(m, region, x.shape)
    out = np.clip(x + n * sel, 0.0, 1.0)
    # Re-copy untouched pixels so they are bit-identical, not just close.
    keep = sel == 0.0
    out[keep] = x[keep]
    return out


def l2_normalize_noise(
    n: np.ndarray, m: np.ndarray, region: str, target: float
) -> np.ndarray:
    """Scale noise on the targeted region to an exact L2 norm, zero elsewhere.

    Normalization is per region so that corrupting a small region and a
    large one injects the same total energy.
    """
    if target <= 0:
        raise ValueError("target norm must be > 0")
    sel = _region_mask(m, region, n.shape)
    if sel.sum() == 0:
        raise EmptyRegionError(f"region {region!r} selects no pixels")
    masked = n * sel
    norm = float(np.sqrt((masked * masked).sum()))
    if norm == 0.0:
        raise EmptyRegionError(f"noise is identically zero on region {region!r}")
    return masked * (target / norm)


# --------------------------------------------------------------------------
# Graying ablations and swaps
# --------------------------------------------------------------------------


def gray_ablate(x: np.ndarray, m: np.ndarray, region: str) -> np.ndarray:
    """Replace the targeted region's pixels with the constant 0.5."""
    if region not in ("foreground", "background"):
        raise ValueError(f"ablation region must be foreground or background, got {region!r}")
    sel = _region_mask(m, region, x.shape)
    out = x.copy()
    out[sel == 1.0] = GRAY_LEVEL
    return out


def attribute_ablate(s: Sample, attr: str) -> np.ndarray:
    """Gray out one localized attribute region of a sample.

    Whole-object attributes are rejected: graying them would erase the
    entire foreground.
    """
    if attr in WHOLE_OBJECT_ATTRIBUTES:
        raise ValueError(f"attribute {attr!r} covers the whole object and cannot be ablated")
    if not s.attributes.get(attr, 0):
        raise ValueError(f"attribute {attr!r} is not positive on sample {s.id!r}")
    mask = s.attribute_masks.get(attr)
    if mask is None:
        raise ValueError(f"attribute {attr!r} has no mask on sample {s.id!r}")
    out = s.image.copy()
    out[mask == 1.0] = GRAY_LEVEL
    return out


def compose_swap(target: Sample, donor: Sample, donor_region: str | tuple[str, str]) -> np.ndarray:
    """Paste the donor's region onto the target at identical coordinates.

    donor_region is "foreground" or ("attribute", name). The donor image is
    bilinearly resized to the target's spatial shape and its mask resized
    nearest-neighbor (re-thresholded) before pasting. No registration or
    blending is attempted.
    """
    if donor_region == "foreground":
        donor_mask = donor.object_mask
    elif (
        isinstance(donor_region, tuple)
        and len(donor_region) == 2
        and donor_region[0] == "attribute"
    ):
        attr = donor_region[1]
        donor_mask = donor.attribute_masks.get(attr)
        if donor_mask is None:
            raise ValueError(f"donor {donor.id!r} has no mask for attribute {attr!r}")
    else:
        raise ValueError(f"unknown donor region {donor_region!r}")

    if donor_mask.sum() == 0:
        raise EmptyRegionError("donor region is empty")

    h, w = target.image.shape[:2]
    donor_image = resize_bilinear(donor.image, h, w)
    donor_mask = resize_mask_nearest(donor_mask, h, w)
    if donor_mask.sum() == 0:
        raise EmptyRegionError("donor region is empty after resizing")

    out = target.image.copy()
    sel = donor_mask == 1.0
    out[sel] = donor_image[sel]
    return out
