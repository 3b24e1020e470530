"""Prototype of the full toy pipeline to calibrate acceptance budgets."""
import json
import os
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from voxaging.argen import AgePair, ARTrainSettings, generate, tokenize_pairs, train_ar, validation_ce
from voxaging.config import parse_config_dict
from voxaging.metrics import psnr, ssim3d, wilcoxon_signed_rank
from voxaging.phantom import VolumeStore, make_dataset
from voxaging.vqvae import TrainSettings, train_vqvae

t0 = time.time()
stamp = lambda: f"[{time.time()-t0:7.1f}s]"
out = "/tmp/proto_run"
os.makedirs(out, exist_ok=True)

cfg = parse_config_dict({})
d = cfg["dataset"]
man = make_dataset(d["n_subjects"], d["visits"], (d["age_min"], d["age_max"]),
                   cfg.grid, cfg.seed, out, noise_sigma=d["noise_sigma"])
store = VolumeStore(man)
print(stamp(), "dataset done:", len(store.records), "scans")

train_vols = [store.load(r) for r in store.split("train")]
val_vols = [store.load(r) for r in store.split("val")]
v = cfg["vqvae"]
log = []
vq = train_vqvae(train_vols, val_vols, cfg.vqvae_config(),
                 TrainSettings(lr=v["lr"], batch_size=v["batch_size"], max_steps=v["max_steps"],
                               eval_interval=v["eval_interval"], patience=v["patience"],
                               seed=cfg.seed), log=log)
evals = [e for e in log if "val_l1" in e]
print(stamp(), f"vqvae done: {len([e for e in log if 'loss' in e])} steps,",
      "val_l1 first/last:", evals[0]["val_l1"], evals[-1]["val_l1"])

# reconstruction quality check
recon_psnrs = [psnr(vv, vq.reconstruct_volume(vv)) for vv in val_vols[:8]]
print(stamp(), "val recon PSNR:", np.round(recon_psnrs, 2), "mean", np.mean(recon_psnrs))

def pairs_of(split):
    out_pairs = []
    for subject in store.subjects(split):
        recs = sorted((r for r in store.split(split) if r.subject == subject),
                      key=lambda r: r.age_norm)
        for i in range(len(recs)):
            for j in range(i + 1, len(recs)):
                out_pairs.append((recs[i], recs[j]))
    return out_pairs

train_recs = [(store.load(p), p.age_norm, store.load(n), n.age_norm, p.subject)
              for p, n in pairs_of("train")]
val_recs = [(store.load(p), p.age_norm, store.load(n), n.age_norm, p.subject)
            for p, n in pairs_of("val")]
print(stamp(), "tokenizing", len(train_recs), "train pairs,", len(val_recs), "val pairs")
tr_pairs = tokenize_pairs(vq, train_recs)
va_pairs = tokenize_pairs(vq, val_recs)
print(stamp(), "tokenized")

a = cfg["ar"]
alog = []
ar = train_ar(tr_pairs, va_pairs, cfg.ar_config(),
              ARTrainSettings(lr=a["lr"], batch_size=a["batch_size"], max_steps=a["max_steps"],
                              eval_interval=a["eval_interval"], patience=a["patience"],
                              seed=cfg.seed), log=alog)
ces = [e for e in alog if "val_ce" in e]
print(stamp(), f"ar done: {len([e for e in alog if 'ce' in e])} steps;",
      "val_ce trajectory:", [round(e["val_ce"], 3) for e in ces[::3]])

rows = []
for prev, nxt in pairs_of("test"):
    pv = store.load(prev)
    fv = store.load(nxt)
    gv, _ = generate(ar, vq, pv, AgePair(prev.age_norm, nxt.age_norm))
    rows.append({
        "subj": prev.subject, "dt": nxt.age_norm - prev.age_norm,
        "psnr_gen": psnr(gv, fv), "psnr_prev": psnr(pv, fv),
        "ssim_gen": ssim3d(gv, fv), "ssim_prev": ssim3d(pv, fv),
    })
pg = np.array([r["psnr_gen"] for r in rows])
pp = np.array([r["psnr_prev"] for r in rows])
sg = np.array([r["ssim_gen"] for r in rows])
sp = np.array([r["ssim_prev"] for r in rows])
w, p_psnr = wilcoxon_signed_rank(pg - pp)
_, p_ssim = wilcoxon_signed_rank(sg - sp)
print(stamp(), f"test pairs={len(rows)}")
print(f"  PSNR gen {pg.mean():.2f}±{pg.std():.2f} vs prev {pp.mean():.2f}±{pp.std():.2f}  p={p_psnr:.2e}")
print(f"  SSIM gen {sg.mean():.4f} vs prev {sp.mean():.4f}  p={p_ssim:.2e}")
print(f"  wins: {np.sum(pg > pp)}/{len(rows)}")
for r in rows[:6]:
    print("   ", {k: (round(v, 3) if isinstance(v, float) else v) for k, v in r.items()})
json.dump(rows, open("/tmp/proto_rows.json", "w"))
print(stamp(), "DONE")
