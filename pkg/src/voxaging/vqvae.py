"""Volume autoencoder around the multi-scale residual quantizer.

Encoder: stem conv, then one stride-2 conv + residual block per downsampling
stage, a single-head self-attention layer at the bottleneck, and a 1x1x1
projection to the latent channels. Decoder mirrors it with trilinear
upsampling. Output passes through a sigmoid so reconstructions live in [0,1].

Residual block: conv3 -> group-norm(4) -> SiLU -> conv3, plus the skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam, EarlyStopper
from .quantize import Codebook, ScaleSchedule, TokenPyramid, decode_accumulate, encode_multiscale, quantization_loss


@dataclass
class VQVAEConfig:
    input_dims: tuple[int, int, int] = (32, 32, 32)
    channels: list[int] = field(default_factory=lambda: [8, 12, 16, 24])
    downsample_factor: int = 8
    latent_channels: int = 8
    vocab_size: int = 64
    schedule: ScaleSchedule = None
    beta: float = 0.25
    lambda_l1: float = 1.0
    lambda_q: float = 1.0
    gn_groups: int = 4
    reserve_zero: bool = False

    def __post_init__(self):
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ValueError(f"downsample factor must be a power of two >= 2, got {f}")
        self.input_dims = tuple(int(e) for e in self.input_dims)
        if any(e % f != 0 for e in self.input_dims):
            raise ValueError(f"downsample factor {f} must divide input dims {self.input_dims}")
        self.n_stages = f.bit_length() - 1
        if len(self.channels) != self.n_stages + 1:
            raise ValueError(f"need {self.n_stages + 1} channel widths for factor {f}, "
                             f"got {len(self.channels)}")
        for c in self.channels:
            g = min(self.gn_groups, c)
            if c % g != 0:
                raise ValueError(f"channel width {c} not divisible by its norm groups {g}")
        latent_grid = tuple(e // f for e in self.input_dims)
        if self.schedule is None:
            self.schedule = ScaleSchedule(default_schedule(latent_grid))
        if tuple(self.schedule.latent_grid) != latent_grid:
            raise ValueError(f"schedule last scale {self.schedule.latent_grid} "
                             f"!= latent grid {latent_grid}")


def default_schedule(latent_grid: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Coarse-to-fine grids (1,1,1), (2,2,2), ... up to the latent grid."""
    dims = []
    k = 1
    while True:
        dims.append(tuple(min(k, e) for e in latent_grid))
        if dims[-1] == tuple(latent_grid):
            return dims
        k += 1


def _conv_init(rng, cout, cin, k, dtype):
    std = np.sqrt(2.0 / (cin * k * k * k))
    return (rng.standard_normal((cout, cin, k, k, k)) * std).astype(dtype)


def _identity_kernel(c, dtype, rng, noise=0.02):
    w = (rng.standard_normal((c, c, 3, 3, 3)) * noise).astype(dtype)
    for i in range(c):
        w[i, i, 1, 1, 1] += 1.0
    return w


class VQVAE:
    """Parameter container plus the encode/decode computations."""

    def __init__(self, cfg: VQVAEConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        ch = cfg.channels
        cl = cfg.latent_channels

        def param(name, arr):
            t = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
            self.params[name] = t
            return t

        param("enc/stem_w", _conv_init(rng, ch[0], 1, 3, dtype))
        param("enc/stem_b", np.zeros(ch[0]))
        for i in range(cfg.n_stages):
            cin, cout = ch[i], ch[i + 1]
            param(f"enc/down{i}_w", _conv_init(rng, cout, cin, 3, dtype))
            param(f"enc/down{i}_b", np.zeros(cout))
            self._init_resblock(rng, f"enc/res{i}", cout, param)
        self._init_attention(rng, "enc/attn", ch[-1], param)
        param("enc/proj_w", _conv_init(rng, cl, ch[-1], 1, dtype))
        param("enc/proj_b", np.zeros(cl))

        self.codebook = Codebook(cfg.vocab_size, cl, rng,
                                 reserve_zero=cfg.reserve_zero, dtype=dtype)
        self.params["quant/codebook"] = self.codebook.table
        self.phi: list[Tensor] = []
        for s in range(cfg.schedule.num_scales):
            w = param(f"quant/phi{s}", _identity_kernel(cl, dtype, rng))
            self.phi.append(w)

        param("dec/proj_w", _conv_init(rng, ch[-1], cl, 1, dtype))
        param("dec/proj_b", np.zeros(ch[-1]))
        self._init_resblock(rng, "dec/res_bot", ch[-1], param)
        self._init_attention(rng, "dec/attn", ch[-1], param)
        for i in reversed(range(cfg.n_stages)):
            cin, cout = ch[i + 1], ch[i]
            param(f"dec/up{i}_w", _conv_init(rng, cout, cin, 3, dtype))
            param(f"dec/up{i}_b", np.zeros(cout))
            if i != 0:  # no residual block at full resolution (cost)
                self._init_resblock(rng, f"dec/res{i}", cout, param)
        # zero-init output conv with the bias near the data's mean intensity:
        # with the mostly-background phantoms the L1 objective otherwise slams
        # the first steps far past the median and training never recovers
        param("dec/out_w", np.zeros((1, ch[0], 3, 3, 3)))
        param("dec/out_b", np.full(1, 0.15))

    def _init_resblock(self, rng, prefix, c, param):
        param(f"{prefix}_conv1_w", _conv_init(rng, c, c, 3, self.dtype))
        param(f"{prefix}_conv1_b", np.zeros(c))
        param(f"{prefix}_gn_g", np.ones(c))
        param(f"{prefix}_gn_b", np.zeros(c))
        param(f"{prefix}_conv2_w", _conv_init(rng, c, c, 3, self.dtype))
        param(f"{prefix}_conv2_b", np.zeros(c))

    def _init_attention(self, rng, prefix, c, param):
        std = 1.0 / np.sqrt(c)
        for nm in ("q", "k", "v", "o"):
            param(f"{prefix}_{nm}_w", (rng.standard_normal((c, c)) * std).astype(self.dtype))
        param(f"{prefix}_gn_g", np.ones(c))
        param(f"{prefix}_gn_b", np.zeros(c))

    # ------------------------------------------------------------ pieces

    def _conv(self, x, wname, bname, stride=1):
        w = self.params[wname]
        b = self.params[bname]
        pad = w.shape[2] // 2
        out = ad.conv3d(x, w, stride=stride, pad=pad)
        c = out.shape[0]
        return ad.add(out, ad.broadcast_to(ad.reshape(b, (c, 1, 1, 1)), out.shape))

    def _group_norm(self, x, gname, bname):
        c = x.shape[0]
        groups = min(self.cfg.gn_groups, c)
        spatial = x.shape[1:]
        h = ad.reshape(x, (groups, -1))
        h = ad.layer_norm(h)
        h = ad.reshape(h, (c,) + tuple(spatial))
        g = ad.broadcast_to(ad.reshape(self.params[gname], (c, 1, 1, 1)), h.shape)
        b = ad.broadcast_to(ad.reshape(self.params[bname], (c, 1, 1, 1)), h.shape)
        return ad.add(ad.mul(h, g), b)

    def _resblock(self, x, prefix):
        h = self._conv(x, f"{prefix}_conv1_w", f"{prefix}_conv1_b")
        h = self._group_norm(h, f"{prefix}_gn_g", f"{prefix}_gn_b")
        h = ad.silu(h)
        h = self._conv(h, f"{prefix}_conv2_w", f"{prefix}_conv2_b")
        return ad.add(x, h)

    def _attention(self, x, prefix):
        # single-head full attention over the (small) latent grid
        c = x.shape[0]
        spatial = x.shape[1:]
        h = self._group_norm(x, f"{prefix}_gn_g", f"{prefix}_gn_b")
        rows = ad.reshape(ad.permute(h, (1, 2, 3, 0)), (-1, c))
        q = ad.matmul(rows, self.params[f"{prefix}_q_w"])
        k = ad.matmul(rows, self.params[f"{prefix}_k_w"])
        v = ad.matmul(rows, self.params[f"{prefix}_v_w"])
        scores = ad.mul(ad.matmul(q, ad.permute(k, (1, 0))), 1.0 / np.sqrt(c))
        attn = ad.masked_softmax(scores)
        mixed = ad.matmul(attn, v)
        out = ad.matmul(mixed, self.params[f"{prefix}_o_w"])
        out = ad.permute(ad.reshape(out, tuple(spatial) + (c,)), (3, 0, 1, 2))
        return ad.add(x, out)

    # ------------------------------------------------------------ pipeline

    def encode(self, x: Tensor) -> Tensor:
        """Volume (H,W,D) -> latent (c, h_S, w_S, d_S)."""
        if x.shape != self.cfg.input_dims:
            raise ValueError(f"encode: input {x.shape} != configured {self.cfg.input_dims}")
        h = ad.reshape(x, (1,) + self.cfg.input_dims)
        h = ad.silu(self._conv(h, "enc/stem_w", "enc/stem_b"))
        for i in range(self.cfg.n_stages):
            h = ad.silu(self._conv(h, f"enc/down{i}_w", f"enc/down{i}_b", stride=2))
            h = self._resblock(h, f"enc/res{i}")
        h = self._attention(h, "enc/attn")
        return self._conv(h, "enc/proj_w", "enc/proj_b")

    def decode_latent(self, rhat: Tensor) -> Tensor:
        """Accumulated residual (c, h_S, w_S, d_S) -> volume (H,W,D) in [0,1]."""
        h = ad.silu(self._conv(rhat, "dec/proj_w", "dec/proj_b"))
        h = self._resblock(h, "dec/res_bot")
        h = self._attention(h, "dec/attn")
        dims = np.array(self.cfg.schedule.latent_grid)
        for i in reversed(range(self.cfg.n_stages)):
            h = ad.silu(self._conv(h, f"dec/up{i}_w", f"dec/up{i}_b"))
            dims = dims * 2
            h = ad.resample_trilinear(h, tuple(dims))
            if i != 0:
                h = self._resblock(h, f"dec/res{i}")
        pre = self._conv(h, "dec/out_w", "dec/out_b")
        # clamp to [0,1] with a straight-through backward: a saturating
        # sigmoid here is untrainable against the pure-L1 objective (the
        # majority-background data drives it into the dead zone)
        h = ad.straight_through(pre, ad.clip(pre, 0.0, 1.0))
        return ad.reshape(h, self.cfg.input_dims)

    def reconstruct(self, x: Tensor):
        """Full pipeline; returns (x_hat, TokenPyramid, z). The decoder input
        uses the straight-through estimator so reconstruction gradients reach
        the encoder."""
        z = self.encode(x)
        pyramid = encode_multiscale(self.codebook, self.cfg.schedule, z, self.phi)
        rhat = pyramid.residual_trace[-1]
        dec_in = ad.straight_through(z, rhat)
        x_hat = self.decode_latent(dec_in)
        return x_hat, pyramid, z

    def loss(self, x: Tensor, x_hat: Tensor, z: Tensor, pyramid: TokenPyramid) -> dict:
        l1 = ad.tmean(ad.absolute(ad.sub(x, x_hat)))
        q = quantization_loss(z, pyramid.residual_trace, self.cfg.beta)
        total = ad.add(ad.mul(l1, self.cfg.lambda_l1), ad.mul(q, self.cfg.lambda_q))
        return {"total": total, "l1": l1, "quant": q}

    # ------------------------------------------------------------ eval helpers

    def tokenize(self, vol: np.ndarray) -> TokenPyramid:
        """Token pyramid + trace values for a volume, off the training graph."""
        with ad.no_grad():
            z = self.encode(Tensor(np.asarray(vol, dtype=self.dtype)))
            pyr = encode_multiscale(self.codebook, self.cfg.schedule, z, self.phi)
        pyr.residual_trace = [t.data for t in pyr.residual_trace]
        pyr.latent = z.data
        return pyr

    def decode_tokens(self, tokens: list[np.ndarray]) -> np.ndarray:
        with ad.no_grad():
            rhat = decode_accumulate(self.codebook, self.cfg.schedule, tokens, self.phi)
            vol = self.decode_latent(rhat)
        return vol.data

    def reconstruct_volume(self, vol: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            x_hat, _, _ = self.reconstruct(Tensor(np.asarray(vol, dtype=self.dtype)))
        return x_hat.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint missing tensor '{k}'")
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"tensor '{k}' shape {arrays[k].shape} != {p.data.shape}")
            p.data = arrays[k].astype(p.data.dtype, copy=True)


def vqvae_loss(x: Tensor, x_hat: Tensor, z: Tensor, residual_trace, lambda_l1: float,
               lambda_q: float, beta: float) -> Tensor:
    """Standalone objective: lambda_L1 * mean|x - x_hat| + lambda_q * quantization loss."""
    l1 = ad.tmean(ad.absolute(ad.sub(x, x_hat)))
    q = quantization_loss(z, residual_trace, beta)
    return ad.add(ad.mul(l1, lambda_l1), ad.mul(q, lambda_q))


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 2
    max_steps: int = 1500
    eval_interval: int = 50
    patience: int = 20
    dead_code_steps: int = 500
    seed: int = 0


def train_vqvae(train_vols: list[np.ndarray], val_vols: list[np.ndarray],
                cfg: VQVAEConfig, settings: TrainSettings,
                log: list | None = None, stop_fn=None) -> VQVAE:
    """Adam training with early stopping on validation L1 (patience counted in
    evaluations). Deterministic under the seed. Returns the best model."""
    if not train_vols:
        raise ValueError("train_vqvae: empty dataset")
    model = VQVAE(cfg, seed=settings.seed)
    opt = Adam(model.params, lr=settings.lr)
    order_rng = np.random.default_rng(settings.seed + 101)
    stopper = EarlyStopper(settings.patience)
    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    last_used = np.zeros(cfg.vocab_size, dtype=np.int64)
    reseed_rng = np.random.default_rng(settings.seed + 202)

    def validate() -> float:
        with ad.no_grad():
            errs = []
            for v in val_vols:
                x = Tensor(np.asarray(v, dtype=model.dtype))
                x_hat, _, _ = model.reconstruct(x)
                errs.append(float(np.mean(np.abs(x.data - x_hat.data))))
        return float(np.mean(errs)) if errs else float("inf")

    n = len(train_vols)
    for step in range(1, settings.max_steps + 1):
        idx = order_rng.integers(0, n, size=settings.batch_size)
        opt.zero_grad()
        tot = l1v = qv = 0.0
        z_pool = None
        used = set()
        for i in idx:
            x = Tensor(np.asarray(train_vols[i], dtype=model.dtype))
            x_hat, pyramid, z = model.reconstruct(x)
            parts = model.loss(x, x_hat, z, pyramid)
            loss = ad.mul(parts["total"], 1.0 / settings.batch_size)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"train_vqvae: non-finite loss at step {step}")
            ad.backward(loss)
            tot += float(loss.data)
            l1v += float(parts["l1"].data) / settings.batch_size
            qv += float(parts["quant"].data) / settings.batch_size
            for tk in pyramid.tokens:
                used.update(np.unique(tk).tolist())
            z_pool = z.data.reshape(z.shape[0], -1)
        opt.step()
        model.codebook.pin_zero_row()

        if cfg.lambda_q > 0:
            last_used[np.array(sorted(used), dtype=np.int64)] = step
            stale = np.where(step - last_used >= settings.dead_code_steps)[0]
            for code in stale:
                if cfg.reserve_zero and code == 0:
                    continue
                col = int(reseed_rng.integers(0, z_pool.shape[1]))
                model.codebook.table.data[code] = z_pool[:, col]
                opt.state["m"]["quant/codebook"][code] = 0.0
                opt.state["v"]["quant/codebook"][code] = 0.0
                last_used[code] = step

        if log is not None:
            log.append({"step": step, "loss": tot, "l1": l1v, "quant": qv})

        if step % settings.eval_interval == 0 or step == settings.max_steps:
            val_l1 = validate()
            if log is not None:
                log.append({"step": step, "val_l1": val_l1})
            if stopper.update(val_l1):
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if stopper.should_stop:
                break
            if stop_fn is not None and stop_fn(model, step):
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
                break

    if val_vols:
        model.load_state_arrays(best_state)
    model.opt_state = opt.state
    return model
