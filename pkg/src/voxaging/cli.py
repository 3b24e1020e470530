"""Command-line pipeline: dataset -> VQVAE -> AR -> generation -> evaluation.

Every stage logs line-delimited JSON into its run directory, echoes the
effective config it ran under, and writes a checksum table of its artifacts,
so any two runs from one seed can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .argen import (AgePair, ARModel, ARTrainSettings, generate, tokenize_pairs,
                    train_ar, validation_ce)
from .age_experiment import (RegressorSettings, age_regressor_experiment,
                             format_experiment_table)
from .checkpoint import ConfigHashMismatch, load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config
from .metrics import MetricReport, psnr, ssim3d, save_slice_montage, wilcoxon_signed_rank
from .phantom import VolumeStore, load_volume, make_dataset, save_volume
from .vqvae import TrainSettings, VQVAE, train_vqvae


class JsonlLogger:
    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._f = open(path, "a")

    def log(self, event: str, **kw):
        self._f.write(json.dumps({"event": event, **kw}, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_checksums(run_dir: str) -> None:
    sums = {}
    for root, _dirs, files in os.walk(run_dir):
        for name in sorted(files):
            if name == "checksums.json":
                continue
            full = os.path.join(root, name)
            rel = os.path.relpath(full, run_dir)
            sums[rel] = _sha256(full)
    with open(os.path.join(run_dir, "checksums.json"), "w") as f:
        json.dump(sums, f, sort_keys=True, indent=2)


def _prepare_run_dir(cfg, out_dir: str) -> JsonlLogger:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        f.write(cfg.to_json())
    return JsonlLogger(os.path.join(out_dir, "log.jsonl"))


def _model_arrays(model, opt_state=None, steps=0):
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    if opt_state is not None:
        for k, v in opt_state["m"].items():
            arrays[f"adam_m/{k}"] = v
        for k, v in opt_state["v"].items():
            arrays[f"adam_v/{k}"] = v
        arrays["meta/step"] = np.array(opt_state["step"], dtype=np.int64)
    else:
        arrays["meta/step"] = np.array(steps, dtype=np.int64)
    return arrays


def _params_from_arrays(arrays):
    return {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}


def load_vqvae(cfg, path: str, override_hash=False) -> VQVAE:
    arrays, _ = load_checkpoint(path, expected_hash=cfg.vqvae_hash(),
                                override_hash=override_hash)
    model = VQVAE(cfg.vqvae_config(), seed=cfg.seed)
    model.load_state_arrays(_params_from_arrays(arrays))
    return model


def load_ar(cfg, path: str, override_hash=False) -> ARModel:
    arrays, _ = load_checkpoint(path, expected_hash=cfg.ar_hash(),
                                override_hash=override_hash)
    model = ARModel(cfg.ar_config(), seed=cfg.seed)
    model.load_state_arrays(_params_from_arrays(arrays))
    return model


def subject_pairs(store: VolumeStore, split: str):
    """All ordered same-subject visit pairs (earlier -> later) in a split."""
    pairs = []
    for subject in store.subjects(split):
        recs = sorted((r for r in store.split(split) if r.subject == subject),
                      key=lambda r: (r.age_norm, r.path))
        for i in range(len(recs)):
            for j in range(i + 1, len(recs)):
                pairs.append((recs[i], recs[j]))
    return pairs


# ------------------------------------------------------------------ stages


def cmd_make_data(args) -> int:
    cfg = parse_config(args.config)
    log = _prepare_run_dir(cfg, args.out)
    d = cfg["dataset"]
    manifest = make_dataset(d["n_subjects"], d["visits"], (d["age_min"], d["age_max"]),
                            cfg.grid, cfg.seed, args.out, noise_sigma=d["noise_sigma"],
                            min_visit_gap=d["min_visit_gap"])
    log.log("make_data_done", manifest=os.path.relpath(manifest, args.out),
            n_subjects=d["n_subjects"], visits=d["visits"])
    log.close()
    write_checksums(args.out)
    print(f"dataset written: {manifest}")
    return 0


def cmd_train_vqvae(args) -> int:
    cfg = parse_config(args.config)
    log = _prepare_run_dir(cfg, args.out)
    store = VolumeStore(args.data)
    train = [store.load(r) for r in store.split("train")]
    val = [store.load(r) for r in store.split("val")]
    v = cfg["vqvae"]
    settings = TrainSettings(lr=v["lr"], batch_size=v["batch_size"], max_steps=v["max_steps"],
                             eval_interval=v["eval_interval"], patience=v["patience"],
                             dead_code_steps=v["dead_code_steps"], seed=cfg.seed)
    entries: list = []
    model = train_vqvae(train, val, cfg.vqvae_config(), settings, log=entries)
    for e in entries:
        log.log("vqvae_train", **e)
    path = os.path.join(args.out, "vqvae.ckpt")
    save_checkpoint(path, _model_arrays(model, getattr(model, "opt_state", None)),
                    cfg.vqvae_hash())
    log.log("vqvae_saved", checkpoint="vqvae.ckpt",
            val_l1=min((e["val_l1"] for e in entries if "val_l1" in e), default=None))
    log.close()
    write_checksums(args.out)
    print(f"vqvae checkpoint: {path}")
    return 0


def cmd_train_ar(args) -> int:
    cfg = parse_config(args.config)
    log = _prepare_run_dir(cfg, args.out)
    store = VolumeStore(args.data)
    vqvae = load_vqvae(cfg, args.vqvae)
    records = []
    for split in ("train", "val"):
        for prev, nxt in subject_pairs(store, split):
            records.append((split, store.load(prev), prev.age_norm,
                            store.load(nxt), nxt.age_norm, prev.subject))
    train_recs = [r[1:] for r in records if r[0] == "train"]
    val_recs = [r[1:] for r in records if r[0] == "val"]
    log.log("tokenizing", train_pairs=len(train_recs), val_pairs=len(val_recs))
    train_pairs = tokenize_pairs(vqvae, train_recs)
    val_pairs = tokenize_pairs(vqvae, val_recs)
    a = cfg["ar"]
    settings = ARTrainSettings(lr=a["lr"], batch_size=a["batch_size"], max_steps=a["max_steps"],
                               eval_interval=a["eval_interval"], patience=a["patience"],
                               seed=cfg.seed)
    entries: list = []
    model = train_ar(train_pairs, val_pairs, cfg.ar_config(), settings, log=entries)
    for e in entries:
        log.log("ar_train", **e)
    path = os.path.join(args.out, "ar.ckpt")
    save_checkpoint(path, _model_arrays(model, getattr(model, "opt_state", None)),
                    cfg.ar_hash())
    log.log("ar_saved", checkpoint="ar.ckpt", final_val_ce=validation_ce(model, val_pairs))
    log.close()
    write_checksums(args.out)
    print(f"ar checkpoint: {path}")
    return 0


def cmd_generate(args) -> int:
    cfg = parse_config(args.config)
    log = _prepare_run_dir(cfg, args.out)
    store = VolumeStore(args.data)
    vqvae = load_vqvae(cfg, args.vqvae)
    armodel = load_ar(cfg, args.ar)
    g = cfg["generate"]
    rng = np.random.default_rng(cfg.seed + 909)
    gen_dir = os.path.join(args.out, "generated")
    os.makedirs(gen_dir, exist_ok=True)
    n = 0
    for prev, nxt in subject_pairs(store, args.split):
        vol, _ = generate(armodel, vqvae, store.load(prev),
                          AgePair(prev.age_norm, nxt.age_norm),
                          sampler=g["sampler"], temperature=g["temperature"],
                          top_k=g["top_k"], rng=rng)
        name = f"{prev.subject}_{prev.age_norm:.4f}_to_{nxt.age_norm:.4f}.vol"
        save_volume(vol, os.path.join(gen_dir, name))
        log.log("generated", subject=prev.subject, t_prev=prev.age_norm,
                t_target=nxt.age_norm, path=f"generated/{name}")
        n += 1
    log.close()
    write_checksums(args.out)
    print(f"generated {n} volumes into {gen_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = parse_config(args.config)
    log = _prepare_run_dir(cfg, args.out)
    store = VolumeStore(args.data)
    vqvae = load_vqvae(cfg, args.vqvae)
    armodel = load_ar(cfg, args.ar)
    g = cfg["generate"]
    e = cfg["evaluate"]
    rng = np.random.default_rng(cfg.seed + 909)
    report = MetricReport(settings={"split": args.split, "ssim_window": e["ssim_window"],
                                    "ssim_sigma": 1.5, "ssim_k1": 0.01, "ssim_k2": 0.03,
                                    "sampler": g["sampler"]})
    first_triplet = None
    for prev, nxt in subject_pairs(store, args.split):
        prev_vol = store.load(prev)
        future = store.load(nxt)
        gen_vol, _ = generate(armodel, vqvae, prev_vol, AgePair(prev.age_norm, nxt.age_norm),
                              sampler=g["sampler"], temperature=g["temperature"],
                              top_k=g["top_k"], rng=rng)
        row = {
            "subject": prev.subject,
            "t_prev": prev.age_norm,
            "t_target": nxt.age_norm,
            "psnr": psnr(gen_vol, future),
            "ssim": ssim3d(gen_vol, future, window=e["ssim_window"]),
            "psnr_baseline": psnr(prev_vol, future),
            "ssim_baseline": ssim3d(prev_vol, future, window=e["ssim_window"]),
        }
        report.add_pair(**row)
        log.log("evaluated_pair", **{k: v for k, v in row.items()})
        if first_triplet is None:
            first_triplet = {"previous": prev_vol, "generated": gen_vol, "true_future": future}
    if not report.pairs:
        print(f"no pairs in split '{args.split}'", file=sys.stderr)
        return 1
    report.summarize(["psnr", "ssim", "psnr_baseline", "ssim_baseline"])
    finite = [p for p in report.pairs if np.isfinite(p["psnr"]) and np.isfinite(p["psnr_baseline"])]
    if len(finite) >= 2:
        dp = [p["psnr"] - p["psnr_baseline"] for p in finite]
        ds = [p["ssim"] - p["ssim_baseline"] for p in finite]
        try:
            _, p_psnr = wilcoxon_signed_rank(dp)
            _, p_ssim = wilcoxon_signed_rank(ds)
            report.summary["wilcoxon_p_psnr_vs_baseline"] = p_psnr
            report.summary["wilcoxon_p_ssim_vs_baseline"] = p_ssim
        except ValueError:
            pass
    report.save(os.path.join(args.out, "report.jsonl"))
    table = report.format_table()
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(table + "\n")
    if (e["montage"] or args.montage) and first_triplet is not None:
        save_slice_montage(first_triplet, os.path.join(args.out, "montage.png"))
    log.close()
    write_checksums(args.out)
    print(table)
    return 0


def cmd_age_experiment(args) -> int:
    cfg = parse_config(args.config)
    log = _prepare_run_dir(cfg, args.out)
    store = VolumeStore(args.data)
    vqvae = load_vqvae(cfg, args.vqvae)
    armodel = load_ar(cfg, args.ar)
    x = cfg["age_experiment"]
    settings = RegressorSettings(lr=x["lr"], batch_size=x["batch_size"],
                                 max_steps=x["max_steps"], eval_interval=x["eval_interval"],
                                 patience=x["patience"], seed=cfg.seed)
    result = age_regressor_experiment(store, vqvae, armodel, settings,
                                      age_increment=x["age_increment"],
                                      gen_cfg=cfg["generate"])
    log.log("age_experiment", **{k: v for k, v in result.items()})
    with open(os.path.join(args.out, "age_experiment.json"), "w") as f:
        json.dump(result, f, sort_keys=True, indent=2)
    table = format_experiment_table(result)
    with open(os.path.join(args.out, "age_experiment.txt"), "w") as f:
        f.write(table + "\n")
    log.close()
    write_checksums(args.out)
    print(table)
    return 0


# ------------------------------------------------------------------ checks


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_gradients
    from .autodiff import Tensor

    rng = np.random.default_rng(0)
    checks = []

    def t64(arr):
        return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)

    checks.append(("matmul", lambda: check_gradients(
        lambda a, b: ad.tsum(ad.matmul(a, b)),
        [t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2)))])))
    checks.append(("conv3d", lambda: check_gradients(
        lambda x, w: ad.tmean(ad.conv3d(x, w, stride=2, pad=1)),
        [t64(rng.standard_normal((2, 4, 4, 4))), t64(rng.standard_normal((3, 2, 3, 3, 3)))],
        max_elems=96)))
    checks.append(("resample_trilinear", lambda: check_gradients(
        lambda x: ad.tmean(ad.mul(ad.resample_trilinear(x, (5, 2, 4)),
                                  ad.resample_trilinear(x, (5, 2, 4)))),
        [t64(rng.standard_normal((2, 3, 4, 2)))])))
    checks.append(("layer_norm", lambda: check_gradients(
        lambda x, w: ad.tsum(ad.mul(ad.layer_norm(x), w)),
        [t64(rng.standard_normal((3, 5))), t64(rng.standard_normal((3, 5)))])))
    targets = rng.integers(0, 5, size=6)
    checks.append(("softmax_cross_entropy", lambda: check_gradients(
        lambda l: ad.softmax_cross_entropy(l, targets),
        [t64(rng.standard_normal((6, 5)))])))

    def micro_ar():
        from .argen import ARConfig, ARModel, pair_loss, TokenizedPair, AgePair
        from .quantize import ScaleSchedule, TokenPyramid
        cfg = ARConfig(d_model=8, n_blocks=1, n_heads=2, vocab_size=4, code_dim=2,
                       schedule=ScaleSchedule([(1, 1, 1), (2, 2, 2)]))
        model = ARModel(cfg, seed=1, dtype=np.float64)
        model.params["head_w"].data = rng.standard_normal(
            model.params["head_w"].data.shape) * 0.3
        latent = (2, 2, 2, 2)
        tp = TokenizedPair(
            [rng.standard_normal(latent) for _ in range(2)],
            [rng.standard_normal(latent) for _ in range(2)],
            TokenPyramid(tokens=[rng.integers(0, 4, size=d) for d in cfg.schedule.dims]),
            AgePair(0.2, 0.8))
        worst = 0.0
        for name in ("word_w", "blk0/attn_q_w", "blk0/cross_v_w", "head_w"):
            orig = model.params[name]

            def f(w):
                model.params[name] = w
                return pair_loss(model, tp)

            worst = max(worst, check_gradients(
                f, [Tensor(orig.data.copy(), requires_grad=True, dtype=np.float64)],
                max_elems=16))
            model.params[name] = orig
        return worst

    checks.append(("micro_ar_model", micro_ar))

    failures = 0
    for name, fn in checks:
        try:
            worst = fn()
            print(f"[ok] {name}: worst normalized error {worst:.3e}")
        except Exception as exc:
            failures += 1
            print(f"[FAIL] {name}: {exc}")
    print(f"gradcheck: {len(checks) - failures}/{len(checks)} passed")
    return 0 if failures == 0 else 1


def cmd_selftest(args) -> int:
    import tempfile
    from .autodiff import Tensor
    from .quantize import Codebook, ScaleSchedule, encode_multiscale, nearest_code
    from .argen import ARConfig, ARModel
    from .metrics import r_squared
    from .phantom import render_volume, subject_from_seed

    rng = np.random.default_rng(0)
    results = []

    def check(name, fn):
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:
            results.append((name, False, str(exc)))

    def trilinear_identity():
        x = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
        assert np.array_equal(ad.resample_trilinear(x, (3, 4, 5)).data, x.data)
        y = ad.resample_trilinear(Tensor(np.array([0., 1.]).reshape(1, 2, 1, 1)), (4, 1, 1))
        assert np.allclose(y.data.reshape(-1), [0, .25, .75, 1])

    def nearest_code_oracle():
        cb = Codebook(32, 4, np.random.default_rng(1))
        q = rng.standard_normal((50, 4)).astype(np.float32)
        got = nearest_code(cb, q)
        t = cb.table.data.astype(np.float64)
        for i, row in enumerate(q.astype(np.float64)):
            dists = ((t - row) ** 2).sum(axis=1)
            assert got[i] == int(np.argmin(dists))

    def residual_monotone():
        cb = Codebook(16, 4, np.random.default_rng(2), reserve_zero=True, dtype=np.float64)
        sched = ScaleSchedule([(2, 2, 2)] * 3)
        z = rng.standard_normal((4, 2, 2, 2))
        pyr = encode_multiscale(cb, sched, Tensor(z, dtype=np.float64), [None] * 3)
        prev = np.linalg.norm(z)
        for t in pyr.residual_trace:
            resid = np.linalg.norm(z - t.data)
            assert resid <= prev + 1e-12
            prev = resid

    def mask_causality():
        cfg = ARConfig(d_model=8, n_blocks=1, n_heads=2, vocab_size=4, code_dim=2,
                       schedule=ScaleSchedule([(1, 1, 1), (2, 2, 2)]))
        m = ARModel(cfg, seed=3)
        assert np.all(np.isinf(m.layout["mask"][1, 2:]))

    def metric_examples():
        a = np.zeros((8, 8, 8))
        assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6
        b = rng.random((8, 8, 8))
        assert ssim3d(b, b) == 1.0
        w, p = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6])
        assert w == 21 and abs(p - 0.03125) < 1e-12
        assert r_squared([1, 2, 3], [2, 2, 2]) == 0.0

    def vol_roundtrip():
        with tempfile.TemporaryDirectory() as d:
            v = rng.random((3, 4, 5)).astype(np.float32)
            p = os.path.join(d, "x.vol")
            save_volume(v, p)
            assert np.array_equal(load_volume(p), v)

    def checkpoint_roundtrip():
        with tempfile.TemporaryDirectory() as d:
            arrays = {"a/w": rng.standard_normal((3, 4)).astype(np.float32),
                      "meta/step": np.array(7, dtype=np.int64)}
            p = os.path.join(d, "c.ckpt")
            save_checkpoint(p, arrays, "deadbeef")
            back, h = load_checkpoint(p, expected_hash="deadbeef")
            assert h == "deadbeef"
            for k in arrays:
                assert np.array_equal(back[k], arrays[k])

    def phantom_determinism():
        p = subject_from_seed(5)
        a = render_volume(p, 0.5, (8, 8, 8))
        b = render_volume(p, 0.5, (8, 8, 8))
        assert np.array_equal(a, b)

    check("trilinear identity + 1-D convention", trilinear_identity)
    check("nearest-code vs linear scan", nearest_code_oracle)
    check("residual norm monotonicity", residual_monotone)
    check("segment mask causality", mask_causality)
    check("metric reference values", metric_examples)
    check("VOL1 round trip", vol_roundtrip)
    check("checkpoint round trip", checkpoint_roundtrip)
    check("phantom determinism", phantom_determinism)

    failures = 0
    for name, ok, msg in results:
        print(f"[{'ok' if ok else 'FAIL'}] {name}" + (f": {msg}" if msg else ""))
        failures += 0 if ok else 1
    print(f"selftest: {len(results) - failures}/{len(results)} passed")
    return 0 if failures == 0 else 1


# ------------------------------------------------------------------ dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxaging",
                                description="aging-phantom volume synthesis pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        sp = sub.add_parser(name)
        for flag, kw in flags.items():
            sp.add_argument(flag, **kw)
        sp.set_defaults(fn=fn)
        return sp

    add("make-data", cmd_make_data,
        **{"--config": dict(required=True), "--out": dict(required=True)})
    add("train-vqvae", cmd_train_vqvae,
        **{"--config": dict(required=True), "--data": dict(required=True),
           "--out": dict(required=True)})
    add("train-ar", cmd_train_ar,
        **{"--config": dict(required=True), "--data": dict(required=True),
           "--vqvae": dict(required=True), "--out": dict(required=True)})
    add("generate", cmd_generate,
        **{"--config": dict(required=True), "--data": dict(required=True),
           "--vqvae": dict(required=True), "--ar": dict(required=True),
           "--out": dict(required=True), "--split": dict(default="test")})
    add("evaluate", cmd_evaluate,
        **{"--config": dict(required=True), "--data": dict(required=True),
           "--vqvae": dict(required=True), "--ar": dict(required=True),
           "--out": dict(required=True), "--split": dict(default="test"),
           "--montage": dict(action="store_true")})
    add("age-experiment", cmd_age_experiment,
        **{"--config": dict(required=True), "--data": dict(required=True),
           "--vqvae": dict(required=True), "--ar": dict(required=True),
           "--out": dict(required=True)})
    add("gradcheck", cmd_gradcheck)
    add("selftest", cmd_selftest)
    return p


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    # VOXAGING_RUN_ROOT rebases relative --out paths (the only other
    # environment override besides VOXAGING_THREADS)
    root = os.environ.get("VOXAGING_RUN_ROOT")
    if root and getattr(args, "out", None) and not os.path.isabs(args.out):
        args.out = os.path.join(root, args.out)
    try:
        return args.fn(args)
    except (ConfigError, ConfigHashMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
