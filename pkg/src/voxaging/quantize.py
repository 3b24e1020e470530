"""Learnable codebook and hierarchical multi-scale residual quantization.

The continuous latent z (c, h, w, d) is explained scale by scale: at scale s
the running residual is downsampled to the scale's grid, each position is
snapped to its nearest codebook row, and the dequantized contribution
(upsampled back to the latent grid and passed through a small per-scale
convolution) is subtracted from the residual and added to the running
reconstruction. Encoding and decoding share the same recurrence, so the
encoder-side accumulation trace equals the decoder's output bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Codebook:
    """V x c table of code vectors. With reserve_zero, row 0 is pinned to the
    zero vector and must be excluded from training updates."""

    def __init__(self, vocab_size: int, code_dim: int, rng: np.random.Generator,
                 reserve_zero: bool = False, dtype=np.float32):
        if vocab_size < 2 or code_dim < 1:
            raise ValueError(f"codebook needs V >= 2 and c >= 1, got V={vocab_size}, c={code_dim}")
        self.vocab_size = vocab_size
        self.code_dim = code_dim
        self.reserve_zero = reserve_zero
        # uniform on [-1/V, 1/V] per component
        init = rng.uniform(-1.0 / vocab_size, 1.0 / vocab_size,
                           size=(vocab_size, code_dim)).astype(dtype)
        if reserve_zero:
            init[0] = 0.0
        self.table = Tensor(init, requires_grad=True)

    def pin_zero_row(self):
        if self.reserve_zero:
            self.table.data[0] = 0.0


@dataclass
class ScaleSchedule:
    """Per-scale spatial grids, coarse to fine; the last grid is the latent grid."""

    dims: list[tuple[int, int, int]]

    def __post_init__(self):
        self.dims = [tuple(int(e) for e in d) for d in self.dims]
        if not self.dims:
            raise ValueError("schedule needs at least one scale")
        for d in self.dims:
            if len(d) != 3 or any(e < 1 for e in d):
                raise ValueError(f"bad scale dims {d}")
        for a, b in zip(self.dims, self.dims[1:]):
            if any(x > y for x, y in zip(a, b)):
                raise ValueError(f"scale dims must be componentwise non-decreasing: {a} -> {b}")

    @property
    def num_scales(self) -> int:
        return len(self.dims)

    @property
    def latent_grid(self) -> tuple[int, int, int]:
        return self.dims[-1]

    def tokens_per_scale(self) -> list[int]:
        return [h * w * d for (h, w, d) in self.dims]


@dataclass
class TokenPyramid:
    """Integer token maps per scale plus (optionally) the accumulated
    residual trace at the full latent grid and the continuous latent."""

    tokens: list[np.ndarray]
    residual_trace: list | None = field(default=None)
    latent: np.ndarray | None = field(default=None)

    def validate(self, schedule: ScaleSchedule, vocab_size: int):
        if len(self.tokens) != schedule.num_scales:
            raise ValueError("token pyramid scale count does not match schedule")
        for tk, dims in zip(self.tokens, schedule.dims):
            if tk.shape != dims:
                raise ValueError(f"token map shape {tk.shape} != schedule dims {dims}")
            if tk.size and (tk.min() < 0 or tk.max() >= vocab_size):
                raise IndexError(f"token index outside [0, {vocab_size})")


def raster_flatten(arr: np.ndarray) -> np.ndarray:
    """Flatten trailing spatial axes in raster order (x fastest, then y, then z)."""
    return arr.reshape(arr.shape[:-3] + (-1,), order="F") if arr.ndim > 3 else arr.reshape(-1, order="F")


def raster_unflatten(flat: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    lead = flat.shape[:-1]
    return flat.reshape(lead + tuple(dims), order="F")


def _spatial_to_rows(x: Tensor) -> Tensor:
    """(c, h, w, d) -> (n, c) with raster position order."""
    c = x.shape[0]
    perm = ad.permute(x, (3, 2, 1, 0))       # (d, w, h, c): C-order flatten = x fastest
    return ad.reshape(perm, (-1, c))


def _rows_to_spatial(rows: Tensor, dims: tuple[int, int, int]) -> Tensor:
    c = rows.shape[1]
    h, w, d = dims
    cube = ad.reshape(rows, (d, w, h, c))
    return ad.permute(cube, (3, 2, 1, 0))    # back to (c, h, w, d)


def nearest_code(codebook: Codebook, vectors) -> np.ndarray:
    """Index of the codebook row minimizing squared Euclidean distance, per
    row of `vectors` (n, c). Ties break toward the lowest index. Distances
    are evaluated in float64 with the direct (x - b)^2 expansion so results
    match a brute-force scan exactly."""
    v = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors)
    if v.ndim != 2 or v.shape[1] != codebook.code_dim:
        raise ValueError(f"nearest_code: expected (n, {codebook.code_dim}), got {v.shape}")
    q = v.astype(np.float64, copy=False)
    table = codebook.table.data.astype(np.float64, copy=False)
    diff = q[:, None, :] - table[None, :, :]
    dist = np.sum(diff * diff, axis=2)
    return np.argmin(dist, axis=1)


def _scale_step(codebook: Codebook, residual: Tensor, dims, latent_grid,
                phi_w: Tensor | None):
    """One hierarchical step: quantize the downsampled residual, return the
    token map and the dequantized contribution on the latent grid."""
    down = ad.resample_trilinear(residual, dims)
    rows = _spatial_to_rows(down)
    idx = nearest_code(codebook, rows)
    looked = ad.take_rows(codebook.table, idx)           # (n, c), grads reach the table
    quant = _rows_to_spatial(looked, dims)
    up = ad.resample_trilinear(quant, latent_grid)
    if phi_w is not None:
        # bias-free so the pinned zero codeword dequantizes to exactly zero
        up = ad.conv3d(up, phi_w, stride=1, pad=phi_w.shape[2] // 2)
    tokens = raster_unflatten(idx, dims)
    return tokens, up


def encode_multiscale(codebook: Codebook, schedule: ScaleSchedule, z: Tensor,
                      phi: list[Tensor | None]) -> TokenPyramid:
    """Coarse-to-fine residual tokenization of a latent z (c, h, w, d).

    phi holds one bias-free 3^3 convolution weight per scale, or None entries
    for the identity. Returns the token maps and the accumulated trace
    [r_hat_1 .. r_hat_S] (Tensors on the current graph)."""
    if z.shape[1:] != schedule.latent_grid:
        raise ValueError(f"latent grid {z.shape[1:]} does not match schedule {schedule.latent_grid}")
    if len(phi) != schedule.num_scales:
        raise ValueError("need one conv (or None) per scale")
    latent = schedule.latent_grid
    residual = z
    acc = None
    tokens, trace = [], []
    for s, dims in enumerate(schedule.dims):
        tk, contrib = _scale_step(codebook, residual, dims, latent, phi[s])
        tokens.append(tk)
        residual = ad.sub(residual, contrib)
        acc = contrib if acc is None else ad.add(acc, contrib)
        trace.append(acc)
    return TokenPyramid(tokens=tokens, residual_trace=trace)


def dequant_contribution(codebook: Codebook, dims, latent_grid, tokens_s: np.ndarray,
                         phi_s: Tensor | None) -> Tensor:
    """Conv(Up(Lookup(B, f_s))) for one scale's token map, on the latent grid."""
    idx = raster_flatten(tokens_s)
    looked = ad.take_rows(codebook.table, idx)
    quant = _rows_to_spatial(looked, dims)
    up = ad.resample_trilinear(quant, latent_grid)
    if phi_s is not None:
        up = ad.conv3d(up, phi_s, stride=1, pad=phi_s.shape[2] // 2)
    return up


def decode_accumulate(codebook: Codebook, schedule: ScaleSchedule, tokens: list[np.ndarray],
                      phi: list[Tensor | None], full_trace: bool = False):
    """Sum the dequantized per-scale contributions: r_hat_s = r_hat_{s-1} +
    Conv(Up(Lookup(B, f_s))). Returns r_hat_S, or the whole trace list."""
    pyramid = TokenPyramid(tokens=list(tokens))
    pyramid.validate(schedule, codebook.vocab_size)
    if len(phi) != schedule.num_scales:
        raise ValueError("need one conv (or None) per scale")
    latent = schedule.latent_grid
    acc = None
    trace = []
    for s, dims in enumerate(schedule.dims):
        up = dequant_contribution(codebook, dims, latent, tokens[s], phi[s])
        acc = up if acc is None else ad.add(acc, up)
        trace.append(acc)
    return trace if full_trace else acc


def quantization_loss(z: Tensor, residual_trace: list[Tensor], beta: float) -> Tensor:
    """Sum over scales of mean((z - sg[r_hat_k])^2) + beta * mean((sg[z] - r_hat_k)^2).

    The first term only reaches z (encoder commitment); the second only the
    codebook/conv parameters inside the trace."""
    total = None
    for rhat in residual_trace:
        d1 = ad.sub(z, ad.stop_gradient(rhat))
        commit = ad.tmean(ad.mul(d1, d1))
        d2 = ad.sub(ad.stop_gradient(z), rhat)
        book = ad.tmean(ad.mul(d2, d2))
        term = ad.add(commit, ad.mul(book, beta))
        total = term if total is None else ad.add(total, term)
    return total
