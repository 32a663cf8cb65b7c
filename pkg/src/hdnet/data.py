"""Synthetic harmonization triples, PNG I/O, and dataset manifests.

A sample is fully determined by (seed, size, band): a smooth multi-scale color
field with soft shapes for the ground truth, one rectangle or ellipse mask
whose area falls in the requested foreground-ratio band, and a seeded color
perturbation applied inside the mask to produce the composite. Everything is
regenerable from the manifest line alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autograd import ContractError, DimensionError, Tensor
from .model import Mask, compose_image


class GenerationError(RuntimeError):
    """The requested mask band cannot be realized at the given size."""


BAND_ORDER = ("low", "mid", "high")
BANDS = {"low": (0.0, 0.05), "mid": (0.05, 0.15), "high": (0.15, 1.0)}

# A foreground must occupy a majority of at least one 16x16 cell to stay
# visible after downscaling to the bottleneck grid; 140 pixels leaves margin
# over the 128-pixel majority threshold.
_CELL = 16
_MIN_VISIBLE_PX = 140
_HIGH_BAND_CAP = 0.6


@dataclass
class PerturbParams:
    """Per-channel color shift applied to the foreground region."""
    gain: np.ndarray       # 3 values in [0.5, 1.5]
    offset: np.ndarray     # 3 values in [-0.2, 0.2]
    gamma: float           # in [0.7, 1.4]

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.gain.shape != (3,) or self.offset.shape != (3,):
            raise DimensionError("gain and offset must each hold 3 values")
        if np.any(self.gain < 0.5) or np.any(self.gain > 1.5):
            raise ContractError(f"gain out of [0.5, 1.5]: {self.gain}")
        if np.any(self.offset < -0.2) or np.any(self.offset > 0.2):
            raise ContractError(f"offset out of [-0.2, 0.2]: {self.offset}")
        if not 0.7 <= self.gamma <= 1.4:
            raise ContractError(f"gamma out of [0.7, 1.4]: {self.gamma}")

    @classmethod
    def identity(cls) -> "PerturbParams":
        return cls(gain=np.ones(3), offset=np.zeros(3), gamma=1.0)

    def is_identity(self) -> bool:
        return (self.gamma == 1.0 and np.all(self.gain == 1.0)
                and np.all(self.offset == 0.0))

    def apply(self, img: np.ndarray) -> np.ndarray:
        """Shift a [3,H,W] image in [0,1]; the identity setting returns the
        input bits untouched."""
        if self.is_identity():
            return img
        out = np.power(img, self.gamma) if self.gamma != 1.0 else img
        out = out * self.gain[:, None, None] + self.offset[:, None, None]
        return np.clip(out, 0.0, 1.0)


@dataclass
class CompositeSample:
    """One training/eval unit: real image, composite to fix, and the mask."""
    ground_truth: np.ndarray    # [1,3,H,W] in [0,1]
    composite: np.ndarray       # [1,3,H,W] in [0,1]
    mask: Mask
    seed: int


def _bilinear_up(grid: np.ndarray, size: int) -> np.ndarray:
    """Resize a [3,g,g] grid to [3,size,size] by bilinear interpolation."""
    g = grid.shape[-1]
    pos = np.linspace(0.0, g - 1.0, size)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    f = pos - i0
    rows = grid[:, i0, :] * (1 - f)[None, :, None] + grid[:, i1, :] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Seeded ground truth: layered low-frequency color noise plus soft shapes."""
    img = np.zeros((3, size, size))
    weight, total = 1.0, 0.0
    for cells in (3, 6, 12):
        img += weight * _bilinear_up(rng.random((3, cells + 1, cells + 1)), size)
        total += weight
        weight *= 0.45
    img /= total
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size * 0.08, size * 0.3, 2)
        region = _ellipse(size, cy, cx, ry, rx)
        color = rng.random(3)
        alpha = rng.uniform(0.3, 0.7) * region
        img = img * (1 - alpha) + color[:, None, None] * alpha
    return np.clip(img, 0.0, 1.0)


def _mask_visible_at_bottleneck(vals: np.ndarray, size: int) -> bool:
    m = Mask(vals)
    small = m.resized(size // _CELL, size // _CELL)
    return not small.is_degenerate()


def _sample_mask(rng: np.random.Generator, size: int, band: str) -> Mask:
    lo, hi = BANDS[band]
    total = size * size
    need_visible = size >= 64
    min_px = max(1, int(np.ceil(lo * total)))
    if need_visible:
        min_px = max(min_px, _MIN_VISIBLE_PX)
    hi_eff = min(hi, _HIGH_BAND_CAP) if band == "high" else hi
    max_px = int(np.floor(hi_eff * total))
    if min_px > max_px:
        raise GenerationError(f"band {band!r} unachievable at size {size}")

    for _ in range(200):
        area = int(rng.integers(min_px, max_px + 1))
        small = need_visible and area <= 230
        if small:
            # fit the shape inside one bottleneck cell so it survives
            # downscaling, and keep budget for a satellite below
            area = min(area, max(max_px - 46, min_px))
            if rng.random() < 0.5:
                h = int(rng.integers(max(1, -(-area // _CELL)), _CELL + 1))
                w = min(_CELL, max(1, round(area / h)))
                cy, cx = rng.integers(0, size // _CELL, 2) * _CELL
                y0 = cy + int(rng.integers(0, _CELL - h + 1))
                x0 = cx + int(rng.integers(0, _CELL - w + 1))
                vals = np.zeros((size, size))
                vals[y0:y0 + h, x0:x0 + w] = 1.0
            else:
                ry = rng.uniform(np.sqrt(area / np.pi) * 0.75, _CELL / 2)
                rx = min(area / (np.pi * ry), _CELL / 2)
                cell_y, cell_x = rng.integers(0, size // _CELL, 2) * _CELL
                cy = cell_y + rng.uniform(ry, _CELL - ry) if _CELL - ry > ry else cell_y + _CELL / 2
                cx = cell_x + rng.uniform(rx, _CELL - rx) if _CELL - rx > rx else cell_x + _CELL / 2
                vals = _ellipse(size, cy, cx, ry, rx)
        else:
            aspect = rng.uniform(0.5, 2.0)
            if rng.random() < 0.5:
                h = max(1, min(size, int(round(np.sqrt(area * aspect)))))
                w = max(1, min(size, int(round(area / h))))
                y0 = int(rng.integers(0, size - h + 1))
                x0 = int(rng.integers(0, size - w + 1))
                vals = np.zeros((size, size))
                vals[y0:y0 + h, x0:x0 + w] = 1.0
            else:
                ry = np.sqrt(area * aspect / np.pi)
                rx = area / (np.pi * ry)
                if 2 * ry >= size - 1 or 2 * rx >= size - 1:
                    continue
                cy = rng.uniform(ry, size - 1 - ry)
                cx = rng.uniform(rx, size - 1 - rx)
                vals = _ellipse(size, cy, cx, ry, rx)
        # jitter every mask so distinct seeds land on distinct masks: add a
        # satellite rectangle while band budget allows, otherwise carve a
        # small bite out of the shape
        budget = max_px - int(vals.sum())
        if budget > 8:
            sat_area = int(rng.integers(6, min(60, budget) + 1))
            sh = int(rng.integers(2, 9))
            sw = max(1, round(sat_area / sh))
            sy = int(rng.integers(0, size - sh + 1))
            sx = int(rng.integers(0, size - sw + 1))
            vals[sy:sy + sh, sx:sx + sw] = 1.0
        else:
            ys, xs = np.nonzero(vals)
            bh, bw = (int(v) for v in rng.integers(2, 9, 2))
            by = int(rng.integers(ys.min(), max(ys.min() + 1, ys.max() - bh + 2)))
            bx = int(rng.integers(xs.min(), max(xs.min() + 1, xs.max() - bw + 2)))
            vals[by:by + bh, bx:bx + bw] = 0.0
        n_fg = vals.sum()
        frac = n_fg / total
        if n_fg < 1 or n_fg > total - 1 or not lo <= frac <= hi:
            continue
        if need_visible and not _mask_visible_at_bottleneck(vals, size):
            continue
        return Mask(vals)
    raise GenerationError(
        f"no mask in band {band!r} found for size {size} after 200 attempts")


def sample_perturb(rng: np.random.Generator) -> PerturbParams:
    return PerturbParams(gain=rng.uniform(0.5, 1.5, 3),
                         offset=rng.uniform(-0.2, 0.2, 3),
                         gamma=float(rng.uniform(0.7, 1.4)))


def generate_sample(seed: int, size: int, fg_ratio_band: str,
                    perturb: PerturbParams | None = None) -> CompositeSample:
    """Deterministic triple for (seed, size, band).

    ``perturb`` overrides the seeded color shift (identity gives a composite
    equal to the ground truth, bit for bit).
    """
    if size < 32 or size % 16:
        raise ContractError(f"size must be >= 32 and divisible by 16, got {size}")
    if fg_ratio_band not in BANDS:
        raise ContractError(f"unknown band {fg_ratio_band!r}, expected one of {BAND_ORDER}")
    rng = np.random.default_rng([seed, size, BAND_ORDER.index(fg_ratio_band)])
    gt = _smooth_field(rng, size)
    mask = _sample_mask(rng, size, fg_ratio_band)
    if perturb is None:
        perturb = sample_perturb(rng)
    fg = perturb.apply(gt)
    composite = compose_image(Tensor(gt[None]), Tensor(fg[None]), mask).data
    return CompositeSample(ground_truth=gt[None].copy(), composite=composite,
                           mask=mask, seed=seed)


# ---------------------------------------------------------------------------
# PNG I/O

def _to_chw(image) -> np.ndarray:
    arr = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a [1,3,H,W] or [3,H,W] image, got shape {arr.shape}")
    return arr


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes, rounding halves up (0.5 -> 128)."""
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def save_image(path, image) -> None:
    arr = _to_chw(image)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError(f"image values must lie in [0,1], got "
                            f"[{arr.min():.4f}, {arr.max():.4f}]")
    Image.fromarray(quantize(arr).transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path) -> Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return Tensor(arr.transpose(2, 0, 1)[None] / 255.0)


def save_mask(path, mask: Mask) -> None:
    Image.fromarray((mask.values[0, 0] * 255).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> Mask:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return mask_binarize(Tensor(arr[None, None] / 255.0))


def mask_binarize(gray) -> Mask:
    """Threshold a [1,1,H,W] map in [0,1] at 0.5 (inclusive)."""
    arr = np.asarray(getattr(gray, "data", gray), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 1:
        raise DimensionError(f"expected a [1,1,H,W] map, got shape {arr.shape}")
    return Mask((arr >= 0.5).astype(np.float64))


# ---------------------------------------------------------------------------
# manifests

def make_manifest_entries(n: int, size: int, seed_start: int = 0) -> list:
    """n samples cycling through the three bands, seeds counting up."""
    return [(seed_start + i, size, BAND_ORDER[i % 3]) for i in range(n)]


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# seed size band\n")
        for seed, size, band in entries:
            fh.write(f"{seed} {size} {band}\n")


def read_manifest(path) -> list:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 'seed size band', got {raw.rstrip()!r}")
            try:
                seed, size = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{ln}: seed and size must be integers") from None
            if parts[2] not in BANDS:
                raise ValueError(f"{path}:{ln}: unknown band {parts[2]!r}")
            entries.append((seed, size, parts[2]))
    if not entries:
        raise ValueError(f"{path}: manifest holds no samples")
    return entries


def load_samples(manifest_path) -> list:
    return [generate_sample(seed, size, band)
            for seed, size, band in read_manifest(manifest_path)]
