"""Scale-wise autoregressive transformer over longitudinal token pyramids.

The input sequence interleaves, per scale, a conditioning segment (embeddings
of the previous scan's accumulated residual, resampled to that scale) and a
context segment (the next scan's accumulation through the previous scale; the
first scale's context is an age-derived start token). Attention is block
causal over segments: a position sees every segment up to and including its
own. Each block applies age-conditioned AdaLN around masked self-attention,
cross-attention onto the two age tokens, and an MLP; a linear head predicts
the next scan's token indices at context positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam, EarlyStopper
from .quantize import ScaleSchedule, TokenPyramid, dequant_contribution, raster_flatten

AGE_EMBED_DIM = 64


@dataclass
class ARConfig:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 64
    code_dim: int = 8
    schedule: ScaleSchedule = None
    strict_paper_blocks: bool = False  # drop the self-attention sublayer (ablation)

    def __post_init__(self):
        if self.schedule is None:
            raise ValueError("ARConfig requires the scale schedule")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")


@dataclass
class AgePair:
    """Acquisition and target ages, normalized to [0,1] over the dataset range."""

    t_prev: float
    t_target: float

    def __post_init__(self):
        for v in (self.t_prev, self.t_target):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"normalized age {v} outside [0, 1]")
        if self.t_target < self.t_prev:
            raise ValueError(f"target age {self.t_target} precedes previous age {self.t_prev}")


@dataclass
class ARSequence:
    embeddings: Tensor                 # (T_total, d_model)
    segment_scale: np.ndarray          # (T,) scale index per position
    segment_kind: np.ndarray           # (T,) 0 = conditioning, 1 = context
    segment_index: np.ndarray          # (T,) 0..2S-1 in order cond_1, ctx_1, ...
    mask_bias: np.ndarray              # (T, T) additive 0 / -inf
    ctx_positions: np.ndarray          # (T_ctx,) row indices of context positions
    targets: np.ndarray | None         # (T_ctx,) next-scan token index per context position


def _layout(schedule: ScaleSchedule):
    """Static per-schedule arrays: scale/kind/segment labels, positional-row
    indices (shared between the cond/ctx twin segments), mask, ctx rows."""
    scale, kind, seg, pos_idx = [], [], [], []
    offsets = np.cumsum([0] + schedule.tokens_per_scale())
    for s, n in enumerate(schedule.tokens_per_scale()):
        for k in (0, 1):
            scale += [s] * n
            kind += [k] * n
            seg += [2 * s + k] * n
            pos_idx += list(range(offsets[s], offsets[s] + n))
    scale = np.array(scale)
    kind = np.array(kind)
    seg = np.array(seg)
    pos_idx = np.array(pos_idx)
    allowed = seg[None, :] <= seg[:, None]
    mask = np.where(allowed, 0.0, -np.inf).astype(np.float32)
    ctx_positions = np.where(kind == 1)[0]
    return {"scale": scale, "kind": kind, "seg": seg, "pos_idx": pos_idx,
            "mask": mask, "ctx": ctx_positions}


def sinusoidal_embedding(value: float, dim: int = AGE_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = value * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class ARModel:
    def __init__(self, cfg: ARConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.layout = _layout(cfg.schedule)
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.params: dict[str, Tensor] = {}

        def param(name, arr):
            t = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
            self.params[name] = t
            return t

        def lin(name, fan_in, fan_out, std=0.02, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else rng.standard_normal((fan_in, fan_out)) * std
            param(f"{name}_w", w)
            param(f"{name}_b", np.zeros(fan_out))

        n_pos = sum(cfg.schedule.tokens_per_scale())
        lin("word", cfg.code_dim, d)
        param("pos", rng.standard_normal((n_pos, d)) * 0.02)
        param("kind", rng.standard_normal((2, d)) * 0.02)
        lin("age1", AGE_EMBED_DIM, d)
        lin("age2", d, d)
        lin("start", 2 * d, d)
        for i in range(cfg.n_blocks):
            for j in (1, 2, 3):
                # AdaLN affine maps start at identity: scale 1, shift 0
                param(f"blk{i}/adaln{j}_scale_w", np.zeros((2 * d, d)))
                param(f"blk{i}/adaln{j}_scale_b", np.ones(d))
                param(f"blk{i}/adaln{j}_shift_w", np.zeros((2 * d, d)))
                param(f"blk{i}/adaln{j}_shift_b", np.zeros(d))
            for nm in ("q", "k", "v", "o"):
                lin(f"blk{i}/attn_{nm}", d, d)
                lin(f"blk{i}/cross_{nm}", d, d)
            lin(f"blk{i}/mlp_1", d, cfg.mlp_ratio * d)
            lin(f"blk{i}/mlp_2", cfg.mlp_ratio * d, d)
        lin("head", d, cfg.vocab_size, zero=True)

    # ------------------------------------------------------------ helpers

    def _linear(self, x: Tensor, name: str) -> Tensor:
        w = self.params[f"{name}_w"]
        b = self.params[f"{name}_b"]
        out = ad.matmul(x, w)
        return ad.add(out, ad.broadcast_to(ad.reshape(b, (1, -1)), out.shape))

    def _heads_split(self, x: Tensor) -> Tensor:
        t, d = x.shape
        hd = d // self.cfg.n_heads
        return ad.permute(ad.reshape(x, (t, self.cfg.n_heads, hd)), (1, 0, 2))

    def _heads_join(self, x: Tensor) -> Tensor:
        h, t, hd = x.shape
        return ad.reshape(ad.permute(x, (1, 0, 2)), (t, h * hd))

    def _adaln(self, h: Tensor, cond: Tensor, name: str) -> Tensor:
        """LN(h) * phi_scale(ages) + phi_shift(ages); cond is (1, 2d)."""
        normed = ad.layer_norm(h)
        scale = self._linear(cond, f"{name}_scale")
        shift = self._linear(cond, f"{name}_shift")
        scale = ad.broadcast_to(scale, h.shape)
        shift = ad.broadcast_to(shift, h.shape)
        return ad.add(ad.mul(normed, scale), shift)

    def _self_attention(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        hd = self.cfg.d_model // self.cfg.n_heads
        q = self._heads_split(self._linear(x, f"{prefix}_q"))
        k = self._heads_split(self._linear(x, f"{prefix}_k"))
        v = self._heads_split(self._linear(x, f"{prefix}_v"))
        scores = ad.mul(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        probs = ad.masked_softmax(scores, mask[None, :, :])
        return self._linear(self._heads_join(ad.matmul(probs, v)), f"{prefix}_o")

    def _cross_attention(self, x: Tensor, age_tokens: Tensor, prefix: str) -> Tensor:
        """Queries from the hidden states, keys and values from the 2 age tokens."""
        hd = self.cfg.d_model // self.cfg.n_heads
        q = self._heads_split(self._linear(x, f"{prefix}_q"))
        k = self._heads_split(self._linear(age_tokens, f"{prefix}_k"))
        v = self._heads_split(self._linear(age_tokens, f"{prefix}_v"))
        scores = ad.mul(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        probs = ad.masked_softmax(scores)
        return self._linear(self._heads_join(ad.matmul(probs, v)), f"{prefix}_o")

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(ad.silu(self._linear(x, f"{prefix}_1")), f"{prefix}_2")

    # ------------------------------------------------------------ ages

    def embed_ages(self, pair: AgePair):
        """Returns (age_tokens (2, d), start_embedding (d,), cond (1, 2d))."""
        sins = np.stack([sinusoidal_embedding(pair.t_prev),
                         sinusoidal_embedding(pair.t_target)]).astype(self.dtype)
        h = self._linear(Tensor(sins), "age1")
        tokens = self._linear(ad.silu(h), "age2")            # (2, d)
        cond = ad.reshape(tokens, (1, 2 * self.cfg.d_model))
        start = ad.reshape(self._linear(cond, "start"), (self.cfg.d_model,))
        return tokens, start, cond

    # ------------------------------------------------------------ sequence

    def segment_features(self, prev_trace: list[np.ndarray], next_trace: list[np.ndarray]):
        """Per-segment (n_s, c) word-embedding inputs, in segment order.
        Entries are None for the start-token segment. Trace entries are
        accumulations at the full latent grid; missing next-scale entries may
        be None when building generation prefixes."""
        sched = self.cfg.schedule
        feats: list[np.ndarray | None] = []
        with ad.no_grad():
            for s, dims in enumerate(sched.dims):
                down = ad.resample_trilinear(Tensor(np.asarray(prev_trace[s], dtype=self.dtype)), dims)
                feats.append(_rows_np(down.data))
                if s == 0:
                    feats.append(None)  # start token segment
                else:
                    nt = next_trace[s - 1] if next_trace is not None else None
                    if nt is None:
                        feats.append(np.zeros((sched.tokens_per_scale()[s], self.cfg.code_dim),
                                              dtype=self.dtype))
                    else:
                        down2 = ad.resample_trilinear(Tensor(np.asarray(nt, dtype=self.dtype)), dims)
                        feats.append(_rows_np(down2.data))
        return feats

    def build_sequence(self, prev_trace, next_trace, next_tokens: TokenPyramid | None,
                       pair: AgePair, feats: list | None = None) -> ARSequence:
        """Assemble the longitudinal training/inference sequence. Targets are
        present when next_tokens is given (teacher forcing). `feats` short-cuts
        the trace resampling when the caller has cached it."""
        if feats is None:
            feats = self.segment_features(prev_trace, next_trace)
        _, start, _ = self.embed_ages(pair)
        seq = self._embed_segments(feats, start)
        lay = self.layout
        targets = None
        if next_tokens is not None:
            targets = np.concatenate([raster_flatten(t) for t in next_tokens.tokens])
        return ARSequence(embeddings=seq, segment_scale=lay["scale"],
                          segment_kind=lay["kind"], segment_index=lay["seg"],
                          mask_bias=lay["mask"], ctx_positions=lay["ctx"], targets=targets)

    def _embed_segments(self, feats: list[np.ndarray | None], start: Tensor) -> Tensor:
        sched = self.cfg.schedule
        n1 = sched.tokens_per_scale()[0]
        pieces = []
        for f in feats:
            if f is None:
                start_row = ad.reshape(start, (1, self.cfg.d_model))
                pieces.append(ad.broadcast_to(start_row, (n1, self.cfg.d_model)))
            else:
                pieces.append(self._linear(Tensor(np.asarray(f, dtype=self.dtype)), "word"))
        emb = ad.concat(pieces, axis=0)
        pos = ad.take_rows(self.params["pos"], self.layout["pos_idx"])
        knd = ad.take_rows(self.params["kind"], self.layout["kind"])
        return ad.add(ad.add(emb, pos), knd)

    # ------------------------------------------------------------ forward

    def forward(self, seq: ARSequence, age_tokens: Tensor, cond: Tensor) -> Tensor:
        """Logits (T_ctx, vocab) at the context positions."""
        h = seq.embeddings
        m = seq.mask_bias
        for i in range(self.cfg.n_blocks):
            if not self.cfg.strict_paper_blocks:
                a = self._adaln(h, cond, f"blk{i}/adaln1")
                h = ad.add(h, self._self_attention(a, m, f"blk{i}/attn"))
            a = self._adaln(h, cond, f"blk{i}/adaln2")
            h = ad.add(h, self._cross_attention(a, age_tokens, f"blk{i}/cross"))
            a = self._adaln(h, cond, f"blk{i}/adaln3")
            h = ad.add(h, self._mlp(a, f"blk{i}/mlp"))
        hc = ad.take_rows(h, seq.ctx_positions)
        return self._linear(hc, "head")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint missing tensor '{k}'")
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"tensor '{k}' shape {arrays[k].shape} != {p.data.shape}")
            p.data = arrays[k].astype(p.data.dtype, copy=True)


def _rows_np(spatial: np.ndarray) -> np.ndarray:
    """(c, h, w, d) -> (n, c) rows in raster order (x fastest)."""
    c = spatial.shape[0]
    return spatial.transpose(3, 2, 1, 0).reshape(-1, c)


def ar_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy averaged uniformly over every context position."""
    return ad.softmax_cross_entropy(logits, targets)


# ---------------------------------------------------------------- generation


def sample_tokens(logits: np.ndarray, sampler: str, temperature: float,
                  top_k: int, rng: np.random.Generator | None) -> np.ndarray:
    if sampler == "greedy":
        return np.argmax(logits, axis=1)
    if sampler != "temperature":
        raise ValueError(f"unknown sampler '{sampler}'")
    if rng is None:
        raise ValueError("temperature sampling needs an RNG")
    scaled = logits.astype(np.float64) / max(temperature, 1e-6)
    if top_k and top_k < scaled.shape[1]:
        kth = np.partition(scaled, -top_k, axis=1)[:, -top_k][:, None]
        scaled = np.where(scaled < kth, -np.inf, scaled)
    scaled -= scaled.max(axis=1, keepdims=True)
    p = np.exp(scaled)
    p /= p.sum(axis=1, keepdims=True)
    return np.array([rng.choice(p.shape[1], p=row) for row in p])


def generate(model: ARModel, vqvae, prev_volume: np.ndarray, pair: AgePair,
             sampler: str = "greedy", temperature: float = 1.0, top_k: int = 0,
             rng: np.random.Generator | None = None):
    """Scale-wise autoregressive synthesis of the target-age volume.

    Returns (volume, TokenPyramid). Greedy sampling is fully deterministic;
    every scale step runs the full-length sequence with later segments
    zero-filled so prefix logits match the teacher-forced pass bit for bit.
    """
    cfg = model.cfg
    sched = cfg.schedule
    if vqvae.cfg.vocab_size != cfg.vocab_size or vqvae.cfg.latent_channels != cfg.code_dim \
            or tuple(vqvae.cfg.schedule.latent_grid) != tuple(sched.latent_grid) \
            or vqvae.cfg.schedule.dims != sched.dims:
        raise ValueError("generate: VQVAE and AR model configurations do not match")
    prev_pyr = vqvae.tokenize(prev_volume)
    prev_trace = prev_pyr.residual_trace

    counts = sched.tokens_per_scale()
    ctx_offsets = np.cumsum([0] + counts)
    tokens: list[np.ndarray] = []
    next_trace: list[np.ndarray] = []
    latent = sched.latent_grid
    with ad.no_grad():
        age_tokens, _, cond = model.embed_ages(pair)
        for s, dims in enumerate(sched.dims):
            trace_for_build = next_trace + [None] * (sched.num_scales - len(next_trace))
            seq = model.build_sequence(prev_trace, trace_for_build, None, pair)
            logits = model.forward(seq, age_tokens, cond)
            rows = logits.data[ctx_offsets[s]:ctx_offsets[s + 1]]
            flat = sample_tokens(rows, sampler, temperature, top_k, rng)
            tk = flat.reshape(tuple(dims), order="F")
            tokens.append(tk)
            contrib = dequant_contribution(vqvae.codebook, dims, latent, tk, vqvae.phi[s])
            acc = contrib if not next_trace else ad.add(Tensor(next_trace[-1]), contrib)
            next_trace.append(acc.data)
        volume = vqvae.decode_tokens(tokens)
    return volume, TokenPyramid(tokens=tokens, residual_trace=next_trace)


# ---------------------------------------------------------------- training


@dataclass
class ARTrainSettings:
    lr: float = 1e-3
    batch_size: int = 4
    max_steps: int = 3000
    eval_interval: int = 100
    patience: int = 20
    seed: int = 0


@dataclass
class TokenizedPair:
    """Frozen-VQVAE view of one longitudinal training pair."""

    prev_trace: list[np.ndarray]
    next_trace: list[np.ndarray]
    next_tokens: TokenPyramid
    pair: AgePair
    subject: str = ""
    feats: list | None = None  # cached word-embedding inputs (model-independent)


def tokenize_pairs(vqvae, records) -> list[TokenizedPair]:
    """records: iterable of (prev_vol, t_prev, next_vol, t_next, subject)."""
    out = []
    for prev_vol, t_prev, next_vol, t_next, subject in records:
        p1 = vqvae.tokenize(prev_vol)
        p2 = vqvae.tokenize(next_vol)
        out.append(TokenizedPair(prev_trace=p1.residual_trace, next_trace=p2.residual_trace,
                                 next_tokens=p2, pair=AgePair(t_prev, t_next), subject=subject))
    return out


def pair_loss(model: ARModel, tp: TokenizedPair) -> Tensor:
    if tp.feats is None:
        tp.feats = model.segment_features(tp.prev_trace, tp.next_trace)
    age_tokens, _, cond = model.embed_ages(tp.pair)
    seq = model.build_sequence(tp.prev_trace, tp.next_trace, tp.next_tokens, tp.pair,
                               feats=tp.feats)
    logits = model.forward(seq, age_tokens, cond)
    return ar_loss(logits, seq.targets)


def validation_ce(model: ARModel, pairs: list[TokenizedPair]) -> float:
    with ad.no_grad():
        vals = [float(pair_loss(model, tp).data) for tp in pairs]
    return float(np.mean(vals)) if vals else float("inf")


def train_ar(train_pairs: list[TokenizedPair], val_pairs: list[TokenizedPair],
             cfg: ARConfig, settings: ARTrainSettings,
             log: list | None = None, stop_fn=None) -> ARModel:
    """Teacher-forced cross-entropy training against a frozen VQVAE's tokens;
    early stopping on validation CE. Deterministic under the seed."""
    if not train_pairs:
        raise ValueError("train_ar: empty pair dataset")
    model = ARModel(cfg, seed=settings.seed)
    opt = Adam(model.params, lr=settings.lr)
    order_rng = np.random.default_rng(settings.seed + 404)
    stopper = EarlyStopper(settings.patience)
    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
    n = len(train_pairs)
    for step in range(1, settings.max_steps + 1):
        idx = order_rng.integers(0, n, size=settings.batch_size)
        opt.zero_grad()
        total = 0.0
        for i in idx:
            loss = ad.mul(pair_loss(model, train_pairs[i]), 1.0 / settings.batch_size)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"train_ar: non-finite loss at step {step}")
            ad.backward(loss)
            total += float(loss.data)
        opt.step()
        if log is not None:
            log.append({"step": step, "ce": total})
        if step % settings.eval_interval == 0 or step == settings.max_steps:
            val = validation_ce(model, val_pairs) if val_pairs else total
            if log is not None:
                log.append({"step": step, "val_ce": val})
            if stopper.update(val):
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            if stopper.should_stop:
                break
            if stop_fn is not None and stop_fn(model, step, total):
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
                break
    model.load_state_arrays(best_state)
    model.opt_state = opt.state
    return model
