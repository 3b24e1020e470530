"""Central finite-difference verification of reverse-mode gradients.

All checks run in float64 with step 1e-5. An element passes when
|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|) with
rtol=1e-4, atol=1e-7; truncation (~h^2) and rounding (~eps/h) are both
orders of magnitude below atol at these settings.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7


class GradCheckError(AssertionError):
    pass


def numeric_gradient(f, inputs, wrt: int, step: float = STEP, max_elems: int = 256,
                     rng: np.random.Generator | None = None):
    """Central differences of scalar-valued f w.r.t. inputs[wrt].

    Returns (flat element indices checked, numeric gradient at those indices).
    Checks every element when the tensor is small, otherwise a seeded sample.
    """
    x = inputs[wrt]
    flat = x.data.reshape(-1)
    n = flat.size
    if n <= max_elems:
        idx = np.arange(n)
    else:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(n, size=max_elems, replace=False))
    num = np.empty(idx.size, dtype=np.float64)
    with ad.no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*inputs).data)
            flat[i] = orig - step
            fm = float(f(*inputs).data)
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * step)
    return idx, num


def check_gradients(f, inputs, step: float = STEP, rtol: float = RTOL, atol: float = ATOL,
                    max_elems: int = 256, rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of scalar f(*inputs) against central
    differences for every input with requires_grad. Returns the worst
    normalized error; raises GradCheckError on failure."""
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks must run in float64")
        t.zero_grad()
    out = f(*inputs)
    if out.data.shape != ():
        raise ValueError("gradient check target must be scalar")
    ad.backward(out)
    worst = 0.0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        if t.grad is None:
            analytic_full = np.zeros_like(t.data)
        else:
            analytic_full = t.grad
        idx, num = numeric_gradient(f, inputs, k, step=step, max_elems=max_elems, rng=rng)
        analytic = analytic_full.reshape(-1)[idx]
        denom = atol + rtol * np.maximum(np.abs(analytic), np.abs(num))
        err = np.abs(analytic - num) / denom
        bad = err > 1.0
        if np.any(bad):
            j = int(np.argmax(err))
            raise GradCheckError(
                f"input {k}: gradient mismatch at flat index {int(idx[j])}: "
                f"analytic={analytic[j]:.8e} numeric={num[j]:.8e} "
                f"(|diff|={abs(analytic[j] - num[j]):.3e}, allowed={denom[j]:.3e})"
            )
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
