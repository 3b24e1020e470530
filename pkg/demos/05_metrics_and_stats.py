"""Fidelity metrics and the paired signed-rank test.

Run:  python3 demos/05_metrics_and_stats.py
"""

import numpy as np

from voxaging.metrics import psnr, ssim3d, wilcoxon_signed_rank
from voxaging.phantom import render_volume, subject_from_seed

vol = render_volume(subject_from_seed(7), 0.5, (24, 24, 24), noise_sigma=0.0)

print("PSNR under growing noise (should fall):")
rng = np.random.default_rng(0)
for sigma in (0.01, 0.02, 0.05, 0.1):
    noisy = np.clip(vol + rng.standard_normal(vol.shape) * sigma, 0, 1)
    print(f"  sigma={sigma:<5} PSNR={psnr(vol, noisy):6.2f} dB  SSIM={ssim3d(vol, noisy):.4f}")

print("\nreference values:")
print("  psnr(a, a+0.1) =", round(psnr(np.zeros((8, 8, 8)), np.full((8, 8, 8), 0.1)), 6),
      "dB (exactly 20)")
print("  ssim(a, a)     =", ssim3d(vol, vol), "(exactly 1.0)")

print("\nWilcoxon signed-rank (two-sided):")
w, p = wilcoxon_signed_rank([0.5, 1.1, 2.0, 0.2, 3.3, 0.9])
print(f"  six positive differences: W={w}, p={p}  (exact: 2/64 = 0.03125)")
w, p = wilcoxon_signed_rank([0.3, -0.3, 1.2, -1.2])
print(f"  mirrored differences:     W={w}, p={p}")
diffs = rng.standard_normal(40) * 0.2 + 0.3
w, p = wilcoxon_signed_rank(diffs)
print(f"  n=40 shifted normals:     W={w}, p={p:.2e}  (normal approximation path)")
