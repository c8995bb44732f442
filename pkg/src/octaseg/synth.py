"""Synthetic lesion samples and the derived training targets.

The generator produces OCTA-flavoured toy images: one or more irregular
bright lesion blobs, a vessel tree grown inside the lesion, multiplicative
speckle, and bright streak artifacts placed strictly outside the lesion so
that artifact-induced over-segmentation stays measurable. Every sample also
carries a 1-px boundary contour and a clipped signed-distance shape target,
both re-derivable from the region mask alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .config import SynthSpec
from .errors import ValidationError

SDF_DIAGONAL_FRACTION = 0.1  # normalization D = fraction * image diagonal


@dataclass
class SampleRecord:
    """One training example with all target maps."""

    image: np.ndarray        # H x W float32 in [0, 1]
    region_mask: np.ndarray  # H x W uint8 {0, 1}
    vessel_mask: np.ndarray  # H x W uint8 {0, 1}, subset of region_mask
    boundary_map: np.ndarray  # H x W uint8 {0, 1}
    shape_map: np.ndarray    # H x W float32 in [-1, 1]
    id: str


def _require_binary(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValidationError(f"{name} must be binary 0/1, found values {vals[:5]}")
    return arr.astype(bool)


def boundary_from_mask(region_mask: np.ndarray, method: str = "morph") -> np.ndarray:
    """1-px boundary contour of a binary mask.

    "morph" marks mask pixels lost under a 3x3 erosion (the inner contour);
    "canny" runs an edge detector with thresholds (0.1, 0.3) on the mask
    scaled to [0, 1]. Image-border pixels are never marked.
    """
    mask = _require_binary(region_mask, "region_mask")
    if method == "morph":
        eroded = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool))
        edge = mask & ~eroded
    elif method == "canny":
        from skimage.feature import canny

        edge = canny(mask.astype(np.float64), sigma=1.0,
                     low_threshold=0.1, high_threshold=0.3)
    else:
        raise ValidationError(f"unknown boundary method {method!r}")
    edge[0, :] = edge[-1, :] = False
    edge[:, 0] = edge[:, -1] = False
    return edge.astype(np.uint8)


def signed_distance(region_mask: np.ndarray) -> np.ndarray:
    """Unnormalized signed Euclidean distance: negative inside the mask,
    positive outside, measured pixel-center to pixel-center."""
    mask = _require_binary(region_mask, "region_mask")
    h, w = mask.shape
    if not mask.any():
        return np.full((h, w), float(math.hypot(h, w)), dtype=np.float64)
    if mask.all():
        return np.full((h, w), -float(math.hypot(h, w)), dtype=np.float64)
    outside = ndimage.distance_transform_edt(~mask)
    inside = ndimage.distance_transform_edt(mask)
    return (outside - inside).astype(np.float64)


def sdf_from_mask(region_mask: np.ndarray) -> np.ndarray:
    """Signed distance divided by one tenth of the image diagonal, clipped to
    [-1, 1]. Strictly negative inside, strictly positive outside."""
    sd = signed_distance(region_mask)
    h, w = sd.shape
    d = SDF_DIAGONAL_FRACTION * math.hypot(h, w)
    return np.clip(sd / d, -1.0, 1.0).astype(np.float32)


def _rasterize_blob(size: int, cy: float, cx: float, radius: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Star-shaped blob: radius modulated by a few random harmonics."""
    n_harm = rng.integers(2, 5)
    amps = rng.uniform(0.04, 0.12, size=n_harm)
    freqs = rng.integers(2, 6, size=n_harm)
    phases = rng.uniform(0, 2 * math.pi, size=n_harm)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    r_lim = radius * (1.0 + sum(a * np.cos(f * theta + p)
                                for a, f, p in zip(amps, freqs, phases)))
    return (np.hypot(dy, dx) < r_lim)


def _grow_vessels(region: np.ndarray, density: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Random-walk branches inside the region until the pixel ratio
    |vessel| / |region| reaches the requested density."""
    vessel = np.zeros_like(region)
    area = int(region.sum())
    if area == 0 or density <= 0:
        return vessel
    target = density * area
    ys, xs = np.nonzero(region)
    centroid = (float(ys.mean()), float(xs.mean()))
    h, w = region.shape
    for attempt in range(400):
        if vessel.sum() >= target:
            break
        # root the first branches at the centroid, later ones anywhere inside
        if attempt < 3 and region[int(centroid[0]), int(centroid[1])]:
            y, x = centroid
        else:
            j = rng.integers(len(ys))
            y, x = float(ys[j]), float(xs[j])
        heading = rng.uniform(0, 2 * math.pi)
        steps = rng.integers(10, 30)
        for _ in range(steps):
            iy, ix = int(round(y)), int(round(x))
            if not (0 <= iy < h and 0 <= ix < w) or not region[iy, ix]:
                break
            vessel[iy, ix] = True
            if rng.random() < 0.35:  # thicken irregularly
                ny, nx = iy + int(rng.integers(-1, 2)), ix + int(rng.integers(-1, 2))
                if 0 <= ny < h and 0 <= nx < w and region[ny, nx]:
                    vessel[ny, nx] = True
            heading += rng.normal(0, 0.45)
            y += math.sin(heading)
            x += math.cos(heading)
    return vessel & region


def _add_streaks(image: np.ndarray, region: np.ndarray, level: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Bright wavy streaks outside the lesion, mimicking projection artifacts."""
    if level <= 0:
        return image
    h, w = image.shape
    out = image.copy()
    n = rng.integers(2, 5)
    for _ in range(n):
        streak = np.zeros((h, w), bool)
        if rng.random() < 0.5:  # roughly vertical
            x0 = rng.uniform(2, w - 3)
            amp, freq, ph = rng.uniform(1, 4), rng.uniform(0.05, 0.2), rng.uniform(0, 6)
            for yy in range(h):
                xx = int(round(x0 + amp * math.sin(freq * yy + ph)))
                if 0 <= xx < w:
                    streak[yy, xx] = True
        else:
            y0 = rng.uniform(2, h - 3)
            amp, freq, ph = rng.uniform(1, 4), rng.uniform(0.05, 0.2), rng.uniform(0, 6)
            for xx in range(w):
                yy = int(round(y0 + amp * math.sin(freq * xx + ph)))
                if 0 <= yy < h:
                    streak[yy, xx] = True
        streak &= ~region
        out[streak] += rng.uniform(0.25, 0.45) * level / 0.3
    return out


def generate_synthetic_sample(seed: int, spec: SynthSpec) -> SampleRecord:
    """Deterministic synthetic sample; identical seeds give identical bits."""
    spec.validate()
    rng = np.random.default_rng(seed)
    size = spec.image_size

    region = np.zeros((size, size), bool)
    base_radius = size / 6.0
    for b in range(spec.n_blobs):
        margin = base_radius * 1.6
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        radius = base_radius * rng.uniform(0.8, 1.25)
        region |= _rasterize_blob(size, cy, cx, radius, rng)

    vessel = _grow_vessels(region, spec.vessel_density, rng)

    image = np.full((size, size), 0.15)
    image[region] = 0.38
    image += 0.06 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
    image[vessel] = rng.uniform(0.72, 0.9, size=int(vessel.sum()))
    image = ndimage.gaussian_filter(image, 0.6)
    image = _add_streaks(image, region, spec.artifact_level, rng)
    if spec.noise_level > 0:
        image *= 1.0 + spec.noise_level * rng.standard_normal((size, size))
        image += 0.5 * spec.noise_level * rng.standard_normal((size, size))
    image = np.clip(image, 0.0, 1.0)

    region_u8 = region.astype(np.uint8)
    return SampleRecord(
        image=image.astype(np.float32),
        region_mask=region_u8,
        vessel_mask=(vessel & region).astype(np.uint8),
        boundary_map=boundary_from_mask(region_u8),
        shape_map=sdf_from_mask(region_u8),
        id=f"synth-{seed:06d}",
    )


def synthesize_dataset(count: int, base_seed: int, spec: SynthSpec) -> list[SampleRecord]:
    return [generate_synthetic_sample(base_seed + i, spec) for i in range(count)]


def rotate_map(arr: np.ndarray, angle_deg: float, flip: bool = False,
               order: int = 1) -> np.ndarray:
    """Rotate (and optionally left-right flip) one map about the image center."""
    out = np.asarray(arr)
    if flip:
        out = out[:, ::-1]
    if angle_deg != 0.0:
        out = ndimage.rotate(out, angle_deg, reshape=False, order=order,
                             mode="constant", cval=0.0, prefilter=order > 1)
    return np.ascontiguousarray(out)


def rotate_sample(sample: SampleRecord, angle_deg: float, flip: bool = False,
                  boundary_method: str = "morph") -> SampleRecord:
    """Apply one geometric transform to image and masks, then re-derive the
    boundary and shape targets from the transformed region mask so all sample
    invariants keep holding."""
    if angle_deg == 0.0 and not flip:
        return replace(sample)
    image = rotate_map(sample.image, angle_deg, flip, order=1)
    region = rotate_map(sample.region_mask, angle_deg, flip, order=0).astype(np.uint8)
    vessel = rotate_map(sample.vessel_mask, angle_deg, flip, order=0).astype(np.uint8)
    vessel &= region  # nearest-neighbour edges may spill outside
    return SampleRecord(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        region_mask=region,
        vessel_mask=vessel,
        boundary_map=boundary_from_mask(region, boundary_method),
        shape_map=sdf_from_mask(region),
        id=sample.id,
    )


def augment(sample: SampleRecord, seed: int,
            boundary_method: str = "morph") -> SampleRecord:
    """Random rotation in [-45, 45] degrees plus an even-odds flip."""
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(-45.0, 45.0))
    flip = bool(rng.random() < 0.5)
    return rotate_sample(sample, angle, flip, boundary_method)


def check_sample(sample: SampleRecord) -> None:
    """Raise if any of the sample invariants is violated."""
    region = _require_binary(sample.region_mask, "region_mask")
    vessel = _require_binary(sample.vessel_mask, "vessel_mask")
    boundary = _require_binary(sample.boundary_map, "boundary_map")
    if (vessel & ~region).any():
        raise ValidationError(f"{sample.id}: vessel pixels outside region")
    band = (ndimage.binary_dilation(region, np.ones((3, 3), bool))
            & ~ndimage.binary_erosion(region, np.ones((3, 3), bool)))
    if (boundary & ~band).any():
        raise ValidationError(f"{sample.id}: boundary outside the edge band")
    sm = sample.shape_map
    if np.abs(sm).max() > 1.0 + 1e-6:
        raise ValidationError(f"{sample.id}: shape map exceeds [-1, 1]")
    if not (sm[region] < 0).all():
        raise ValidationError(f"{sample.id}: shape map not negative inside")
    if not (sm[~region] > 0).all():
        raise ValidationError(f"{sample.id}: shape map not positive outside")
