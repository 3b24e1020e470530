"""Deterministic synthetic longitudinal volumes ("aging phantoms") and file I/O.

A subject is two nested ellipsoids in normalized [-1,1]^3 coordinates: the
outer shell is bright tissue (0.8) that atrophies with age, the inner core is
a dark ventricle (0.2) that grows with age, on a zero background. Boundaries
are softened with a sigmoid of the ellipsoid level set and the tissue carries
a low-amplitude sinusoidal texture, so ground-truth aging is analytically
known. Everything derives from counter-based Philox streams: same seed, same
bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, asdict

import numpy as np

TISSUE_INTENSITY = 0.8
VENTRICLE_INTENSITY = 0.2
BACKGROUND_INTENSITY = 0.0
EDGE_SHARPNESS = 12.0
TEXTURE_AMPLITUDE = 0.05
ATROPHY_RATE = 0.10      # outer radii shrink by 10% over t in [0,1]
VENTRICLE_GROWTH = 0.80  # inner radii grow by 80% over t in [0,1]

VOL_MAGIC = b"VOL1"


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectParams:
    seed: int
    outer_radii: tuple[float, float, float]   # in [0.60, 0.80]
    inner_radii: tuple[float, float, float]   # in [0.12, 0.22]
    texture_phase: tuple[float, float, float]  # in [0, 2*pi)


@dataclass
class ScanRecord:
    subject: str
    age_raw: float
    age_norm: float
    path: str
    split: str


_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _philox(*key_words: int) -> np.random.Generator:
    # fold any number of words into the 2-word Philox key, deterministically
    k = [0, 0]
    for i, w in enumerate(key_words):
        mixed = ((w & _MASK64) * _GOLDEN + i + 1) & _MASK64
        k[i % 2] ^= mixed
    return np.random.Generator(np.random.Philox(key=np.array(k, dtype=np.uint64)))


def subject_from_seed(seed: int) -> SubjectParams:
    rng = _philox(seed, 0x5EED5EED)
    outer = rng.uniform(0.60, 0.80, size=3)
    inner = rng.uniform(0.12, 0.22, size=3)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    return SubjectParams(
        seed=int(seed),
        outer_radii=tuple(float(v) for v in outer),
        inner_radii=tuple(float(v) for v in inner),
        texture_phase=tuple(float(v) for v in phase),
    )


def radii_at_age(params: SubjectParams, t: float):
    a = np.array(params.outer_radii) * (1.0 - ATROPHY_RATE * t)
    b = np.array(params.inner_radii) * (1.0 + VENTRICLE_GROWTH * t)
    return a, b


def ellipsoid_levels(params: SubjectParams, t: float, grid) -> tuple[np.ndarray, np.ndarray]:
    """Level-set values (<0 inside) of the outer and inner ellipsoids on the
    voxel-center grid; independent of the renderer's softening/texture."""
    h, w, d = grid
    ux = ((2.0 * np.arange(h) + 1.0) / h - 1.0)[:, None, None]
    uy = ((2.0 * np.arange(w) + 1.0) / w - 1.0)[None, :, None]
    uz = ((2.0 * np.arange(d) + 1.0) / d - 1.0)[None, None, :]
    a, b = radii_at_age(params, t)
    lv_out = (ux / a[0]) ** 2 + (uy / a[1]) ** 2 + (uz / a[2]) ** 2 - 1.0
    lv_in = (ux / b[0]) ** 2 + (uy / b[1]) ** 2 + (uz / b[2]) ** 2 - 1.0
    return lv_out, lv_in


def render_volume(params: SubjectParams, t: float, grid, noise_sigma: float = 0.02) -> np.ndarray:
    """Render the phantom at normalized age t on grid (H, W, D) -> float32."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"age t={t} outside [0, 1]")
    h, w, d = grid
    lv_out, lv_in = ellipsoid_levels(params, t, grid)
    # sigmoid(-k*lv) in the overflow-free tanh form
    m_out = 0.5 * (1.0 - np.tanh(0.5 * EDGE_SHARPNESS * lv_out))
    m_in = 0.5 * (1.0 - np.tanh(0.5 * EDGE_SHARPNESS * lv_in))

    ux = ((2.0 * np.arange(h) + 1.0) / h - 1.0)[:, None, None]
    uy = ((2.0 * np.arange(w) + 1.0) / w - 1.0)[None, :, None]
    uz = ((2.0 * np.arange(d) + 1.0) / d - 1.0)[None, None, :]
    px, py, pz = params.texture_phase
    tex = (np.sin(3.0 * np.pi * ux + px)
           * np.sin(3.0 * np.pi * uy + py)
           * np.sin(3.0 * np.pi * uz + pz)) * TEXTURE_AMPLITUDE

    vol = (BACKGROUND_INTENSITY
           + (TISSUE_INTENSITY - BACKGROUND_INTENSITY) * m_out
           - (TISSUE_INTENSITY - VENTRICLE_INTENSITY) * m_in
           + tex * m_out)
    if noise_sigma > 0.0:
        tbits = int(np.float64(t).view(np.uint64))
        rng = _philox(params.seed, tbits, 0x4E015E)
        vol = vol + rng.standard_normal(vol.shape) * noise_sigma
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# VOL1 volume format: magic "VOL1", u32 H W D (little endian), then H*W*D
# float32 in raster order (x fastest, then y, then z).


def save_volume(vol: np.ndarray, path: str) -> None:
    if vol.ndim != 3:
        raise ValueError(f"volume must be rank 3, got {vol.shape}")
    payload = np.asarray(vol, dtype="<f4").reshape(-1, order="F").tobytes()
    header = VOL_MAGIC + struct.pack("<III", *vol.shape)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)


def load_volume(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise VolumeFormatError(f"{path}: file shorter than the 16-byte header")
    if blob[:4] != VOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {blob[:4]!r} at byte offset 0")
    h, w, d = struct.unpack("<III", blob[4:16])
    expect = h * w * d * 4
    got = len(blob) - 16
    if got != expect:
        raise VolumeFormatError(
            f"{path}: payload truncated/overlong at byte offset 16: "
            f"expected {expect} bytes for dims {(h, w, d)}, found {got}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=16)
    return np.asarray(flat.reshape((h, w, d), order="F"))


# ---------------------------------------------------------------------------
# manifest: one JSON object per line; first line is a header with the age
# normalization constants and the grid.


def write_manifest(path: str, header: dict, records: list[ScanRecord]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str) -> tuple[dict, list[ScanRecord]]:
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise VolumeFormatError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    records = [ScanRecord(**json.loads(ln)) for ln in lines[1:]]
    return header, records


def make_dataset(n_subjects: int, visits: int, age_range: tuple[float, float],
                 grid, seed: int, out_dir: str, noise_sigma: float = 0.02,
                 min_visit_gap: float = 0.25) -> str:
    """Render `visits` increasing-age scans for each subject, split subjects
    70/15/15 into train/val/test, and write volumes plus a manifest.

    Consecutive visits are at least `min_visit_gap` apart in normalized age
    (longitudinal follow-ups are years apart; back-to-back scans would make
    every previous scan a near-perfect predictor of the next one).
    Returns the manifest path."""
    if n_subjects < 3:
        raise ValueError("need at least 3 subjects to populate three splits")
    if visits < 1:
        raise ValueError("need at least one visit per subject")
    lo, hi = float(age_range[0]), float(age_range[1])
    if hi <= lo:
        raise ValueError(f"bad age range {age_range}")
    span_needed = (visits - 1) * min_visit_gap
    if span_needed >= 1.0:
        raise ValueError(f"{visits} visits with min gap {min_visit_gap} exceed the age range")
    os.makedirs(os.path.join(out_dir, "volumes"), exist_ok=True)

    root = _philox(seed, 0xDA7A5E7)
    subj_seeds = root.integers(0, 1 << 62, size=n_subjects)
    order = root.permutation(n_subjects)
    n_train = max(1, int(round(n_subjects * 0.70)))
    n_val = max(1, int(round(n_subjects * 0.15)))
    if n_train + n_val >= n_subjects:
        n_train = n_subjects - 2
        n_val = 1
    split_of = {}
    for rank, si in enumerate(order):
        if rank < n_train:
            split_of[si] = "train"
        elif rank < n_train + n_val:
            split_of[si] = "val"
        else:
            split_of[si] = "test"

    records = []
    for si in range(n_subjects):
        params = subject_from_seed(int(subj_seeds[si]))
        arng = _philox(int(subj_seeds[si]), 0xA6E5)
        # first visit anywhere that leaves room, later visits gap + slack
        slack = (1.0 - span_needed) / visits
        t0 = arng.uniform(0.0, 1.0 - span_needed - (visits - 1) * slack)
        offsets = np.concatenate([[t0], min_visit_gap + arng.uniform(0.0, slack,
                                                                     size=visits - 1)])
        norm_ages = np.minimum(np.cumsum(offsets), 1.0)
        ages = lo + norm_ages * (hi - lo)
        for vi, raw in enumerate(ages):
            t = (float(raw) - lo) / (hi - lo)
            vol = render_volume(params, t, grid, noise_sigma=noise_sigma)
            rel = os.path.join("volumes", f"subj{si:04d}_v{vi}.vol")
            save_volume(vol, os.path.join(out_dir, rel))
            records.append(ScanRecord(
                subject=f"subj{si:04d}",
                age_raw=float(raw),
                age_norm=t,
                path=rel,
                split=split_of[si],
            ))
    header = {
        "age_min": lo,
        "age_max": hi,
        "grid": list(int(g) for g in grid),
        "n_subjects": n_subjects,
        "visits": visits,
        "noise_sigma": noise_sigma,
        "seed": int(seed),
    }
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest_path, header, records)
    return manifest_path


class VolumeStore:
    """Loads manifest volumes while recording which paths were touched, so
    experiments can prove the test split stayed unread during training."""

    def __init__(self, manifest_path: str):
        self.base = os.path.dirname(os.path.abspath(manifest_path))
        self.header, self.records = load_manifest(manifest_path)
        self.accessed: list[str] = []

    def split(self, name: str) -> list[ScanRecord]:
        return [r for r in self.records if r.split == name]

    def subjects(self, split: str | None = None) -> list[str]:
        recs = self.records if split is None else self.split(split)
        return sorted({r.subject for r in recs})

    def load(self, rec: ScanRecord) -> np.ndarray:
        self.accessed.append(rec.path)
        return load_volume(os.path.join(self.base, rec.path))

    def accessed_splits(self) -> set[str]:
        by_path = {r.path: r.split for r in self.records}
        return {by_path[p] for p in self.accessed if p in by_path}
