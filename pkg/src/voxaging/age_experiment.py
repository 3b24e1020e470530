"""Age-regression augmentation experiment.

Trains a small 3-D conv regressor (three stride-2 conv stages, global average
pool, linear head, MSE on normalized age) twice with identical seeds and
budgets. Note the head regresses a scalar age directly rather than
classifying age bins, a deliberate simplification over the larger
published age predictors this experiment mirrors. It trains once on the
real training scans only, once on real + synthesized future scans, and
reports MAE/R^2 on the untouched real test split. Synthetic
targets use the last visit's age plus a fixed increment, capped at the
maximum training age.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .argen import AgePair, generate
from .metrics import mean_absolute_error, r_squared
from .optim import Adam, EarlyStopper


@dataclass
class RegressorSettings:
    lr: float = 2e-3
    batch_size: int = 8
    max_steps: int = 600
    eval_interval: int = 50
    patience: int = 20
    seed: int = 0


class AgeRegressor:
    """Volume (H,W,D) -> scalar normalized age."""

    CHANNELS = (8, 16, 32)

    def __init__(self, grid, seed: int = 0, dtype=np.float32):
        self.grid = tuple(grid)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        cin = 1
        for i, cout in enumerate(self.CHANNELS):
            std = np.sqrt(2.0 / (cin * 27))
            self.params[f"conv{i}_w"] = Tensor(
                (rng.standard_normal((cout, cin, 3, 3, 3)) * std).astype(dtype),
                requires_grad=True)
            self.params[f"conv{i}_b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
            cin = cout
        self.params["head_w"] = Tensor(
            (rng.standard_normal((cin, 1)) * 0.05).astype(dtype), requires_grad=True)
        self.params["head_b"] = Tensor(np.full(1, 0.5, dtype=dtype), requires_grad=True)

    def forward(self, vol: Tensor) -> Tensor:
        h = ad.reshape(vol, (1,) + self.grid)
        for i in range(len(self.CHANNELS)):
            w = self.params[f"conv{i}_w"]
            b = self.params[f"conv{i}_b"]
            h = ad.conv3d(h, w, stride=2, pad=1)
            c = h.shape[0]
            h = ad.add(h, ad.broadcast_to(ad.reshape(b, (c, 1, 1, 1)), h.shape))
            h = ad.silu(h)
        pooled = ad.reshape(ad.tmean(ad.reshape(h, (h.shape[0], -1)), axis=1), (1, -1))
        out = ad.add(ad.matmul(pooled, self.params["head_w"]),
                     ad.reshape(self.params["head_b"], (1, 1)))
        return ad.reshape(out, (1,))

    def predict(self, vol: np.ndarray) -> float:
        with ad.no_grad():
            return float(self.forward(Tensor(np.asarray(vol, dtype=self.dtype))).data[0])


def train_age_regressor(vols: list[np.ndarray], ages: list[float], grid,
                        settings: RegressorSettings,
                        val: tuple[list, list] | None = None) -> AgeRegressor:
    if not vols:
        raise ValueError("train_age_regressor: empty dataset")
    model = AgeRegressor(grid, seed=settings.seed)
    opt = Adam(model.params, lr=settings.lr)
    rng = np.random.default_rng(settings.seed + 77)
    stopper = EarlyStopper(settings.patience)
    best = {k: p.data.copy() for k, p in model.params.items()}
    n = len(vols)
    ages_arr = np.asarray(ages, dtype=np.float64)
    for step in range(1, settings.max_steps + 1):
        idx = rng.integers(0, n, size=settings.batch_size)
        opt.zero_grad()
        for i in idx:
            pred = model.forward(Tensor(np.asarray(vols[i], dtype=model.dtype)))
            err = ad.sub(pred, float(ages_arr[i]))
            loss = ad.mul(ad.tmean(ad.mul(err, err)), 1.0 / settings.batch_size)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"age regressor: non-finite loss at step {step}")
            ad.backward(loss)
        opt.step()
        if val is not None and (step % settings.eval_interval == 0 or step == settings.max_steps):
            preds = [model.predict(v) for v in val[0]]
            mse = float(np.mean((np.asarray(preds) - np.asarray(val[1])) ** 2))
            if stopper.update(mse):
                best = {k: p.data.copy() for k, p in model.params.items()}
            if stopper.should_stop:
                break
    if val is not None:
        for k, p in model.params.items():
            p.data = best[k]
    return model


def synthesize_future_scans(store, vqvae, armodel, split: str, age_increment: float,
                            age_cap: float, gen_cfg: dict | None = None):
    """One synthetic future scan per subject of the split, conditioned on the
    subject's last visit; target age = last age + increment, capped."""
    gen_cfg = gen_cfg or {}
    out_vols, out_ages = [], []
    for subject in store.subjects(split):
        recs = sorted((r for r in store.split(split) if r.subject == subject),
                      key=lambda r: r.age_norm)
        last = recs[-1]
        t_target = min(last.age_norm + age_increment, age_cap)
        if t_target < last.age_norm:
            continue
        vol = store.load(last)
        synth, _ = generate(armodel, vqvae, vol, AgePair(last.age_norm, t_target),
                            sampler=gen_cfg.get("sampler", "greedy"),
                            temperature=gen_cfg.get("temperature", 1.0),
                            top_k=gen_cfg.get("top_k", 0),
                            rng=np.random.default_rng(gen_cfg.get("sample_seed", 0)))
        out_vols.append(synth)
        out_ages.append(t_target)
    return out_vols, out_ages


def age_regressor_experiment(store, vqvae, armodel, settings: RegressorSettings,
                             age_increment: float = 0.1, gen_cfg: dict | None = None) -> dict:
    """Returns the real-only vs mixed comparison table; raises if the test
    split is touched during any training phase."""
    train_recs = store.split("train")
    val_recs = store.split("val")
    test_recs = store.split("test")
    if not train_recs or not test_recs:
        raise ValueError("age experiment needs non-empty train and test splits")

    train_vols = [store.load(r) for r in train_recs]
    train_ages = [r.age_norm for r in train_recs]
    val_vols = [store.load(r) for r in val_recs]
    val_ages = [r.age_norm for r in val_recs]
    age_cap = max(train_ages)

    synth_vols, synth_ages = synthesize_future_scans(
        store, vqvae, armodel, "train", age_increment, age_cap, gen_cfg)

    if "test" in store.accessed_splits():
        raise RuntimeError("age experiment read test-split volumes during training preparation")

    grid = tuple(store.header["grid"])
    real_model = train_age_regressor(train_vols, train_ages, grid, settings,
                                     val=(val_vols, val_ages) if val_vols else None)
    mixed_model = train_age_regressor(train_vols + synth_vols, train_ages + synth_ages,
                                      grid, settings,
                                      val=(val_vols, val_ages) if val_vols else None)

    if "test" in store.accessed_splits():
        raise RuntimeError("age experiment read test-split volumes during training")

    test_vols = [store.load(r) for r in test_recs]
    test_ages = np.array([r.age_norm for r in test_recs])
    result = {"n_real_train": len(train_vols), "n_synthetic": len(synth_vols),
              "age_increment": age_increment, "age_cap": age_cap}
    for tag, model in (("real_only", real_model), ("mixed", mixed_model)):
        preds = np.array([model.predict(v) for v in test_vols])
        result[tag] = {"mae": mean_absolute_error(test_ages, preds),
                       "r2": r_squared(test_ages, preds)}
    result["mixed_not_worse"] = bool(result["mixed"]["mae"] <= result["real_only"]["mae"])
    return result


def format_experiment_table(result: dict) -> str:
    rows = [
        f"{'training strategy':<22}{'MAE':>10}{'R2':>10}",
        "-" * 42,
        f"{'real only':<22}{result['real_only']['mae']:>10.4f}{result['real_only']['r2']:>10.4f}",
        f"{'real + synthetic':<22}{result['mixed']['mae']:>10.4f}{result['mixed']['r2']:>10.4f}",
    ]
    if not result["mixed_not_worse"]:
        rows.append("[flagged] augmentation did not improve MAE in this run")
    return "\n".join(rows)
