"""Tour of the tensor engine: primitives, gradients, finite differences, Adam.

Run:  python3 demos/02_autodiff_engine.py
"""

import numpy as np

from voxaging import autodiff as ad
from voxaging.autodiff import Tensor, backward
from voxaging.gradcheck import check_gradients
from voxaging.optim import Adam

# --- a small computation graph ------------------------------------------
x = Tensor(np.float64(3.0), requires_grad=True)
y = ad.mul(x, x)                      # x^2
tape = backward(y)
print(f"d(x^2)/dx at x=3 -> {x.grad} (tape replayed {len(tape)} applications)")

# --- the volumetric primitives ------------------------------------------
rng = np.random.default_rng(0)
vol = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(np.float32))
kernel = Tensor(rng.standard_normal((4, 2, 3, 3, 3)).astype(np.float32) * 0.1)
feat = ad.conv3d(vol, kernel, stride=2, pad=1)
print("conv3d 8^3 stride 2 ->", feat.shape)
up = ad.resample_trilinear(feat, (8, 8, 8))
print("trilinear back to    ->", up.shape)

one_d = ad.resample_trilinear(Tensor(np.array([0.0, 1.0]).reshape(1, 2, 1, 1)), (4, 1, 1))
print("1-D resample convention [0,1] -> length 4:", one_d.data.reshape(-1))

# --- every gradient is checked against central differences ----------------
worst = check_gradients(
    lambda a, b: ad.tmean(ad.conv3d(a, b, stride=2, pad=1)),
    [Tensor(rng.standard_normal((2, 4, 4, 4)), requires_grad=True, dtype=np.float64),
     Tensor(rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=True, dtype=np.float64)],
    max_elems=64)
print(f"conv3d gradcheck worst normalized error: {worst:.2e}")

# --- Adam on a quadratic ---------------------------------------------------
p = Tensor(np.float64(1.0), requires_grad=True)
opt = Adam({"p": p}, lr=0.1)
for _ in range(100):
    opt.zero_grad()
    backward(ad.mul(p, p))
    opt.step()
print(f"Adam on f(x)=x^2 from x=1, 100 steps, lr 0.1 -> x = {float(p.data):.4f}")
