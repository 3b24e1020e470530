"""Fidelity metrics, paired statistics, and report assembly.

PSNR/SSIM follow the common conventions: PSNR = 10*log10(range^2 / MSE) with
zero-MSE pairs flagged infinite; SSIM uses a separable 7^3 Gaussian window
(sigma 1.5), K1=0.01, K2=0.03, aggregated over the valid (unpadded) region
only. The Wilcoxon signed-rank test drops zero differences, uses the exact
null distribution up to n=25 (generating-function evaluation, identical to
enumerating all 2^n sign assignments) and the tie-corrected normal
approximation beyond.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateInputError(ValueError):
    pass


# ----------------------------------------------------------------- PSNR

def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the inputs are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("psnr: data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(data_range * data_range / mse)


# ----------------------------------------------------------------- SSIM

def _window_kernel(window: int, sigma: float, kind: str) -> np.ndarray:
    if kind == "uniform":
        return np.full(window, 1.0 / window, dtype=np.float64)
    if kind != "gaussian":
        raise ValueError(f"unknown window kind '{kind}'")
    x = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _local_filter(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation with a 1-D kernel along each axis."""
    for ax in range(3):
        win = np.lib.stride_tricks.sliding_window_view(x, kern.size, axis=ax)
        x = win @ kern
    return x


def ssim3d(a: np.ndarray, b: np.ndarray, window: int = 7, sigma: float = 1.5,
           k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0,
           window_kind: str = "gaussian") -> float:
    """Mean local structural similarity over the valid region of two volumes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim3d: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError("ssim3d: rank-3 volumes required")
    if any(e < window for e in a.shape):
        raise ValueError(f"ssim3d: window {window} larger than volume {a.shape}")
    kern = _window_kernel(window, sigma, window_kind)
    mu_a = _local_filter(a, kern)
    mu_b = _local_filter(b, kern)
    s_aa = _local_filter(a * a, kern) - mu_a * mu_a
    s_bb = _local_filter(b * b, kern) - mu_b * mu_b
    s_ab = _local_filter(a * b, kern) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------- Wilcoxon

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks2: np.ndarray, w2: int) -> float:
    """Exact p from the null distribution of 2*W+ over all 2^n sign choices,
    evaluated with a generating-function DP (identical result, 2^n-free)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    denom = float(2 ** len(ranks2))
    cdf = float(counts[: w2 + 1].sum()) / denom
    sf = float(counts[w2:].sum()) / denom
    return min(1.0, 2.0 * min(cdf, sf))


def wilcoxon_signed_rank(differences) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Returns (W, p) where W is the sum of ranks of the positive differences.
    Zero differences are dropped (standard convention); n=0 after dropping is
    a degenerate input.
    """
    d = np.asarray(differences, dtype=np.float64).reshape(-1)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise DegenerateInputError("wilcoxon: all differences are zero")
    ranks = _average_ranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    if n <= 25:
        ranks2 = np.round(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w_pos))
        p = _exact_two_sided_p(ranks2, w2)
        return w_pos, p
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: subtract sum(t^3 - t)/48 over tie groups
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0:
        raise DegenerateInputError("wilcoxon: zero variance under ties")
    z = (w_pos - mu) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return w_pos, min(1.0, p)


# ----------------------------------------------------------------- regression metrics

def mean_absolute_error(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    return float(np.mean(np.abs(y_true - y_pred)))


def r_squared(y_true, y_pred) -> float:
    """Coefficient of determination; 0 for a mean predictor by definition."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0 if ss_res > 0 else 1.0
    return 1.0 - ss_res / ss_tot


# ----------------------------------------------------------------- reports

@dataclass
class MetricReport:
    """Per-pair fidelity numbers plus summary statistics and p-values."""

    pairs: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def add_pair(self, **kw):
        for key in ("psnr", "psnr_baseline"):
            if key in kw and math.isinf(kw[key]):
                kw[key + "_infinite"] = True
        self.pairs.append(kw)

    def summarize(self, keys: list[str]):
        for key in keys:
            vals = np.array([p[key] for p in self.pairs if key in p and np.isfinite(p[key])])
            if vals.size:
                self.summary[f"{key}_mean"] = float(vals.mean())
                self.summary[f"{key}_std"] = float(vals.std())
                self.summary[f"{key}_n"] = int(vals.size)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "settings", **self.settings}, sort_keys=True)]
        lines += [json.dumps({"kind": "pair", **p}, sort_keys=True) for p in self.pairs]
        lines.append(json.dumps({"kind": "summary", **self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    def format_table(self) -> str:
        rows = [f"{'metric':<28}{'value':>14}"]
        rows.append("-" * 42)
        for k in sorted(self.summary):
            v = self.summary[k]
            rows.append(f"{k:<28}{v:>14.6g}" if isinstance(v, float) else f"{k:<28}{v:>14}")
        return "\n".join(rows)


def save_slice_montage(volumes: dict[str, np.ndarray], path: str, upscale: int = 4):
    """PNG montage of axial/coronal/sagittal center slices, one row per volume."""
    from PIL import Image

    rows = []
    for label, vol in volumes.items():
        h, w, d = vol.shape
        slices = [vol[:, :, d // 2], vol[:, w // 2, :], vol[h // 2, :, :]]
        imgs = []
        for sl in slices:
            arr = np.clip(np.asarray(sl, dtype=np.float64), 0.0, 1.0)
            img = (arr * 255).astype(np.uint8)
            imgs.append(np.kron(img, np.ones((upscale, upscale), dtype=np.uint8)))
        hmax = max(im.shape[0] for im in imgs)
        padded = [np.pad(im, ((0, hmax - im.shape[0]), (0, 2))) for im in imgs]
        rows.append(np.concatenate(padded, axis=1))
    wmax = max(r.shape[1] for r in rows)
    canvas = np.concatenate([np.pad(r, ((0, 4), (0, wmax - r.shape[1]))) for r in rows], axis=0)
    Image.fromarray(canvas, mode="L").save(path)
