"""Aging phantoms: deterministic synthetic subjects with known aging.

Each subject is a pair of nested ellipsoids: bright tissue that shrinks with
age and a dark ventricle that grows. Because the geometry is analytic we can
verify the aging direction exactly, which is what makes the rest of the
pipeline testable without clinical data.

Run:  python3 demos/01_phantom_dataset.py
"""

import tempfile

import numpy as np

from voxaging.phantom import (VolumeStore, ellipsoid_levels, make_dataset,
                              render_volume, subject_from_seed)

subject = subject_from_seed(42)
print("subject 42:")
print("  outer radii:", np.round(subject.outer_radii, 3))
print("  inner radii:", np.round(subject.inner_radii, 3))

grid = (32, 32, 32)
print("\naging trajectory (noise-free counts at threshold 0.5):")
print(f"  {'age':>5} {'tissue':>8} {'ventricle':>10}")
for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    vol = render_volume(subject, t, grid, noise_sigma=0.0)
    lv_out, _ = ellipsoid_levels(subject, t, grid)
    tissue = int((vol > 0.5).sum())
    ventricle = int(((vol < 0.5) & (lv_out < -0.2)).sum())
    print(f"  {t:5.2f} {tissue:8d} {ventricle:10d}")

print("\nsame seed + age twice -> identical bytes:",
      np.array_equal(render_volume(subject, 0.3, grid),
                     render_volume(subject, 0.3, grid)))

with tempfile.TemporaryDirectory() as tmp:
    manifest = make_dataset(n_subjects=6, visits=3, age_range=(50.0, 90.0),
                            grid=(16, 16, 16), seed=7, out_dir=tmp)
    store = VolumeStore(manifest)
    print(f"\ndataset: {len(store.records)} scans, splits:",
          {s: len(store.subjects(s)) for s in ("train", "val", "test")})
    rec = store.split("train")[0]
    vol = store.load(rec)
    print(f"loaded {rec.subject} at raw age {rec.age_raw:.1f} "
          f"(normalized {rec.age_norm:.3f}), shape {vol.shape}")
