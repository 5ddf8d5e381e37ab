"""Compression defense: blockwise DCT quantization of the feature grid.

The flat feature vector is read as a single-channel image, mapped to 8-bit
style pixel units, and pushed through the lossy core of a JPEG codec
(orthonormal DCT, quality-scaled quantization, rounding, inverse DCT).
"""

from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage

from . import metrics
from .errors import UsageError
from .netcore import forward
from .targets import build_constraints, constraint_satisfaction, criterion_vector, divide

# standard JPEG luminance table
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class CompressionConfig:
    quality: int = 50
    block_size: int = 8
    grid_shape: tuple = (20, 20)
    box: tuple = (0.0, 1.0)
    rounding: bool = True
    table: np.ndarray = None  # overrides the scaled luminance table when given

    def __post_init__(self):
        if not 1 <= int(self.quality) <= 100:
            raise UsageError("quality must be in 1..100")
        if self.block_size < 1:
            raise UsageError("block_size must be positive")
        rows, cols = self.grid_shape
        if rows < 1 or cols < 1:
            raise UsageError("grid dimensions must be positive")
        lo, hi = self.box
        if not lo < hi:
            raise UsageError("box must satisfy x_min < x_max")
        if self.table is not None:
            t = np.asarray(self.table, dtype=np.float64)
            if t.shape != (self.block_size, self.block_size) or np.any(t <= 0):
                raise UsageError("table must be a positive block_size x block_size array")
            object.__setattr__(self, "table", t)


def parse_grid(text):
    try:
        rows, cols = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like 20x20, got {text!r}") from None
    return rows, cols


def dct2_block(block):
    return fft.dctn(np.asarray(block, dtype=np.float64), type=2, norm="ortho")


def idct2_block(coef):
    return fft.idctn(np.asarray(coef, dtype=np.float64), type=2, norm="ortho")


def quality_scale(quality):
    q = int(quality)
    return 50.0 / q if q < 50 else (100.0 - q) / 50.0


def base_table(block_size):
    if block_size == 8:
        return LUMA_TABLE.copy()
    # bilinear resampling of the 8x8 table onto a b x b grid
    coords = np.linspace(0.0, 7.0, block_size)
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(LUMA_TABLE, [rr, cc], order=1, mode="nearest")


def quant_table(cfg):
    if cfg.table is not None:
        return cfg.table
    return np.maximum(np.floor(base_table(cfg.block_size) * quality_scale(cfg.quality) + 0.5), 1.0)


def _to_pixels(x, box):
    lo, hi = box
    return (x - lo) / (hi - lo) * 255.0 - 128.0


def _from_pixels(v, box):
    lo, hi = box
    return (v + 128.0) / 255.0 * (hi - lo) + lo


def compress(x, cfg=None):
    cfg = cfg or CompressionConfig()
    x = np.asarray(x, dtype=np.float64)
    rows, cols = cfg.grid_shape
    if x.shape != (rows * cols,):
        raise UsageError(f"feature length {x.size} does not match grid {rows}x{cols}")
    b = cfg.block_size
    pr, pc = -rows % b, -cols % b
    img = np.pad(_to_pixels(x.reshape(rows, cols), cfg.box), ((0, pr), (0, pc)), mode="edge")
    q = quant_table(cfg)
    out = np.empty_like(img)
    for i in range(0, img.shape[0], b):
        for j in range(0, img.shape[1], b):
            coef = dct2_block(img[i:i + b, j:j + b]) / q
            if cfg.rounding:
                coef = np.round(coef)
            out[i:i + b, j:j + b] = idct2_block(coef * q)
    res = _from_pixels(out[:rows, :cols], cfg.box).ravel()
    return np.clip(res, *cfg.box)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class DefenseRow:
    method: str
    uid: int
    success_before: bool
    success_after: bool
    count_before: int
    count_after: int
    tau_before: float
    tau_after: float


def evaluate_one(method, uid, x, y, spec, x_star, p, cfg, threshold=0.5):
    cs = build_constraints(y, spec, threshold)
    crit = criterion_vector(divide(y, spec))
    s_adv = forward(p, x_star)
    s_def = forward(p, compress(x_star, cfg))
    _, before = constraint_satisfaction(cs, s_adv[cs.indices])
    _, after = constraint_satisfaction(cs, s_def[cs.indices])
    row = DefenseRow(method, uid, before == len(cs), after == len(cs), before, after,
                     metrics.kendall_tau_b(s_adv, crit), metrics.kendall_tau_b(s_def, crit))
    return row, forward(p, x), s_adv, s_def


def defense_eval(results, p, cfg=None, threshold=0.5):
    """Re-score attack results after compression.

    ``results`` are :class:`~mladv.attacks.AttackResult` objects (or anything
    with ``method``, ``x``, ``y``, ``spec`` and ``x_star``). Returns
    ``(rows, summary, histograms)`` where ``summary`` maps each method to its
    success rate before and after, and ``histograms`` maps
    ``(series, label)`` to the flipped-label scores for original,
    adversarial and compressed inputs.
    """
    cfg = cfg or CompressionConfig()
    rows, hist = [], {}
    for k, res in enumerate(results):
        uid = getattr(res, "uid", k)
        row, s0, s1, s2 = evaluate_one(res.method, uid, res.x, res.y, res.spec, res.x_star,
                                       p, cfg, threshold)
        rows.append(row)
        for j in res.spec.flip:
            hist.setdefault(("original", j), []).append(s0[j])
            hist.setdefault((f"{res.method}:adversarial", j), []).append(s1[j])
            hist.setdefault((f"{res.method}:compressed", j), []).append(s2[j])
    return rows, summarize(rows), hist


def summarize(rows):
    summary = {}
    for method in dict.fromkeys(r.method for r in rows):
        sel = [r for r in rows if r.method == method]
        summary[method] = {
            "n": len(sel),
            "success_before": float(np.mean([r.success_before for r in sel])),
            "success_after": float(np.mean([r.success_after for r in sel])),
            "tau_before": metrics.nanmean([r.tau_before for r in sel]),
            "tau_after": metrics.nanmean([r.tau_after for r in sel]),
        }
    return summary
