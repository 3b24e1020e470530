"""Small end-to-end run: predict an older scan from a younger one.

Builds a miniature dataset (8^3 so it finishes in about two minutes), trains
the VQVAE and the age-conditioned autoregressive transformer, then generates
each test subject's later scan from its earlier one and compares against the
copy-the-previous-scan baseline.

Run:  python3 demos/04_longitudinal_generation.py
"""

import tempfile

import numpy as np

from voxaging.argen import (AgePair, ARConfig, ARTrainSettings, generate,
                            tokenize_pairs, train_ar)
from voxaging.metrics import psnr
from voxaging.phantom import VolumeStore, make_dataset
from voxaging.vqvae import TrainSettings, VQVAEConfig, train_vqvae

with tempfile.TemporaryDirectory() as tmp:
    manifest = make_dataset(12, 2, (50.0, 90.0), (8, 8, 8), seed=1, out_dir=tmp,
                            noise_sigma=0.01)
    store = VolumeStore(manifest)

    vcfg = VQVAEConfig(input_dims=(8, 8, 8), channels=[8, 16], downsample_factor=2,
                       latent_channels=8, vocab_size=32)
    train = [store.load(r) for r in store.split("train")]
    val = [store.load(r) for r in store.split("val")]
    vq = train_vqvae(train, val, vcfg,
                     TrainSettings(lr=2e-3, batch_size=2, max_steps=600,
                                   eval_interval=100, patience=50, seed=2))
    print("VQVAE trained; val recon PSNR:",
          round(np.mean([psnr(v, vq.reconstruct_volume(v)) for v in val]), 2), "dB")

    def pairs(split):
        out = []
        for subj in store.subjects(split):
            recs = sorted((r for r in store.split(split) if r.subject == subj),
                          key=lambda r: r.age_norm)
            out.append((store.load(recs[0]), recs[0].age_norm,
                        store.load(recs[1]), recs[1].age_norm, subj))
        return out

    tr = tokenize_pairs(vq, pairs("train"))
    acfg = ARConfig(d_model=32, n_blocks=2, n_heads=4, vocab_size=32, code_dim=8,
                    schedule=vcfg.schedule)
    ar = train_ar(tr, [], acfg,
                  ARTrainSettings(lr=1e-3, batch_size=4, max_steps=800,
                                  eval_interval=100, patience=10 ** 9, seed=3))
    print("AR trained on", len(tr), "longitudinal pairs")

    print(f"\n{'subject':<10}{'PSNR generated':>16}{'PSNR baseline':>16}")
    for prev_vol, t0, future, t1, subj in pairs("test"):
        gen_vol, pyramid = generate(ar, vq, prev_vol, AgePair(t0, t1))
        print(f"{subj:<10}{psnr(gen_vol, future):>16.2f}{psnr(prev_vol, future):>16.2f}")

    gen2, _ = generate(ar, vq, prev_vol, AgePair(t0, t1))
    print("\ngreedy generation is deterministic:", np.array_equal(gen_vol, gen2))
