"""Run configuration: JSON in, validated + defaulted RunConfig out.

Validation is fail-fast but exhaustive: every unknown key, type error, and
range violation in the document is reported in one exception.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .checkpoint import config_hash
from .quantize import ScaleSchedule
from .vqvae import VQVAEConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "grid": [32, 32, 32],
    "schedule": [[1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4]],
    "dataset": {
        "n_subjects": 60,
        "visits": 3,
        "age_min": 50.0,
        "age_max": 90.0,
        "noise_sigma": 0.02,
        "min_visit_gap": 0.25,
    },
    "vqvae": {
        "channels": [8, 12, 16, 24],
        "downsample_factor": 8,
        "latent_channels": 8,
        "vocab_size": 64,
        "beta": 0.25,
        "lambda_l1": 1.0,
        "lambda_q": 1.0,
        "lr": 2e-3,
        "batch_size": 2,
        "max_steps": 2500,
        "eval_interval": 50,
        "patience": 20,
        "dead_code_steps": 500,
    },
    "ar": {
        "d_model": 64,
        "n_blocks": 4,
        "n_heads": 4,
        "mlp_ratio": 4,
        "lr": 1e-3,
        "batch_size": 4,
        "max_steps": 3000,
        "eval_interval": 100,
        "patience": 20,
        "strict_paper_blocks": False,
    },
    "generate": {
        "sampler": "greedy",
        "temperature": 1.0,
        "top_k": 0,
    },
    "evaluate": {
        "ssim_window": 7,
        "montage": False,
    },
    "age_experiment": {
        "age_increment": 0.1,
        "lr": 2e-3,
        "batch_size": 8,
        "max_steps": 600,
        "eval_interval": 50,
        "patience": 20,
    },
}


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def grid(self) -> tuple:
        return tuple(self.raw["grid"])

    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule([tuple(d) for d in self.raw["schedule"]])

    def vqvae_config(self) -> VQVAEConfig:
        v = self.raw["vqvae"]
        return VQVAEConfig(
            input_dims=self.grid,
            channels=list(v["channels"]),
            downsample_factor=v["downsample_factor"],
            latent_channels=v["latent_channels"],
            vocab_size=v["vocab_size"],
            schedule=self.schedule(),
            beta=v["beta"],
            lambda_l1=v["lambda_l1"],
            lambda_q=v["lambda_q"],
        )

    def ar_config(self):
        from .argen import ARConfig
        a = self.raw["ar"]
        return ARConfig(
            d_model=a["d_model"],
            n_blocks=a["n_blocks"],
            n_heads=a["n_heads"],
            mlp_ratio=a["mlp_ratio"],
            vocab_size=self.raw["vqvae"]["vocab_size"],
            code_dim=self.raw["vqvae"]["latent_channels"],
            schedule=self.schedule(),
            strict_paper_blocks=a["strict_paper_blocks"],
        )

    def vqvae_hash(self) -> str:
        return config_hash({"grid": self.raw["grid"], "schedule": self.raw["schedule"],
                            "vqvae": self.raw["vqvae"], "kind": "vqvae"})

    def ar_hash(self) -> str:
        return config_hash({"grid": self.raw["grid"], "schedule": self.raw["schedule"],
                            "vqvae": self.raw["vqvae"], "ar": self.raw["ar"], "kind": "ar"})

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"


def _merge_with_defaults(doc: dict, defaults: dict, path: str, problems: list) -> dict:
    out = {}
    for key, dv in defaults.items():
        if key not in doc:
            out[key] = json.loads(json.dumps(dv))  # deep copy
            continue
        val = doc[key]
        if isinstance(dv, dict):
            if not isinstance(val, dict):
                problems.append(f"{path}{key}: expected an object")
                out[key] = dv
            else:
                out[key] = _merge_with_defaults(val, dv, f"{path}{key}.", problems)
        else:
            out[key] = val
    for key in doc:
        if key not in defaults:
            problems.append(f"{path}{key}: unknown key")
    return out


def _type_name(v):
    return type(v).__name__


def _validate(cfg: dict, problems: list):
    def numeric(path, v, lo=None, hi=None, integer=False):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            problems.append(f"{path}: expected a number, got {_type_name(v)}")
            return
        if integer and not isinstance(v, int):
            problems.append(f"{path}: expected an integer")
            return
        if lo is not None and v < lo:
            problems.append(f"{path}: {v} below minimum {lo}")
        if hi is not None and v > hi:
            problems.append(f"{path}: {v} above maximum {hi}")

    numeric("seed", cfg["seed"], integer=True)
    grid = cfg["grid"]
    if not (isinstance(grid, list) and len(grid) == 3 and
            all(isinstance(e, int) and e >= 4 for e in grid)):
        problems.append("grid: expected three integer extents >= 4")
        return
    sched = cfg["schedule"]
    ok_sched = isinstance(sched, list) and sched and all(
        isinstance(d, list) and len(d) == 3 and all(isinstance(e, int) and e >= 1 for e in d)
        for d in sched)
    if not ok_sched:
        problems.append("schedule: expected a list of [h,w,d] integer triples")
    else:
        for a, b in zip(sched, sched[1:]):
            if any(x > y for x, y in zip(a, b)):
                problems.append(f"schedule: dims must be non-decreasing, got {a} -> {b}")

    d = cfg["dataset"]
    numeric("dataset.n_subjects", d["n_subjects"], lo=3, integer=True)
    numeric("dataset.visits", d["visits"], lo=1, integer=True)
    numeric("dataset.age_min", d["age_min"])
    numeric("dataset.age_max", d["age_max"])
    if isinstance(d["age_min"], (int, float)) and isinstance(d["age_max"], (int, float)) \
            and d["age_max"] <= d["age_min"]:
        problems.append("dataset.age_max: must exceed dataset.age_min")
    numeric("dataset.noise_sigma", d["noise_sigma"], lo=0.0)
    numeric("dataset.min_visit_gap", d["min_visit_gap"], lo=0.0, hi=1.0)
    if isinstance(d["visits"], int) and isinstance(d["min_visit_gap"], (int, float)) \
            and not isinstance(d["min_visit_gap"], bool) \
            and (d["visits"] - 1) * d["min_visit_gap"] >= 1.0:
        problems.append("dataset.min_visit_gap: visits cannot fit in the age range")

    v = cfg["vqvae"]
    numeric("vqvae.downsample_factor", v["downsample_factor"], lo=2, integer=True)
    f = v["downsample_factor"]
    if isinstance(f, int):
        if f & (f - 1):
            problems.append(f"vqvae.downsample_factor: {f} is not a power of two")
        elif ok_sched and all(isinstance(e, int) for e in grid):
            latent = [e // f for e in grid]
            if any(e % f for e in grid):
                problems.append(f"vqvae.downsample_factor: {f} does not divide grid {grid}")
            elif list(sched[-1]) != latent:
                problems.append(
                    f"schedule: last scale {sched[-1]} != latent grid {latent} (grid/factor)")
        if isinstance(v["channels"], list) and len(v["channels"]) != f.bit_length():
            problems.append(
                f"vqvae.channels: need {f.bit_length()} widths for factor {f}, "
                f"got {len(v['channels'])}")
    numeric("vqvae.latent_channels", v["latent_channels"], lo=1, integer=True)
    numeric("vqvae.vocab_size", v["vocab_size"], lo=2, integer=True)
    numeric("vqvae.beta", v["beta"], lo=0.0)
    numeric("vqvae.lambda_l1", v["lambda_l1"], lo=0.0)
    numeric("vqvae.lambda_q", v["lambda_q"], lo=0.0)
    numeric("vqvae.lr", v["lr"], lo=0.0)
    for k in ("batch_size", "max_steps", "eval_interval", "patience", "dead_code_steps"):
        numeric(f"vqvae.{k}", v[k], lo=1, integer=True)

    a = cfg["ar"]
    for k in ("d_model", "n_blocks", "n_heads", "mlp_ratio", "batch_size",
              "max_steps", "eval_interval", "patience"):
        numeric(f"ar.{k}", a[k], lo=1, integer=True)
    numeric("ar.lr", a["lr"], lo=0.0)
    if isinstance(a["d_model"], int) and isinstance(a["n_heads"], int) \
            and a["n_heads"] >= 1 and a["d_model"] % a["n_heads"]:
        problems.append(f"ar.d_model: {a['d_model']} not divisible by ar.n_heads {a['n_heads']}")
    if not isinstance(a["strict_paper_blocks"], bool):
        problems.append("ar.strict_paper_blocks: expected a boolean")

    g = cfg["generate"]
    if g["sampler"] not in ("greedy", "temperature"):
        problems.append(f"generate.sampler: unknown sampler '{g['sampler']}'")
    numeric("generate.temperature", g["temperature"], lo=1e-6)
    numeric("generate.top_k", g["top_k"], lo=0, integer=True)

    e = cfg["evaluate"]
    numeric("evaluate.ssim_window", e["ssim_window"], lo=3, integer=True)
    if not isinstance(e["montage"], bool):
        problems.append("evaluate.montage: expected a boolean")

    x = cfg["age_experiment"]
    numeric("age_experiment.age_increment", x["age_increment"], lo=0.0, hi=1.0)
    numeric("age_experiment.lr", x["lr"], lo=0.0)
    for k in ("batch_size", "max_steps", "eval_interval", "patience"):
        numeric(f"age_experiment.{k}", x[k], lo=1, integer=True)


def parse_config_dict(doc: dict) -> RunConfig:
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    merged = _merge_with_defaults(doc, DEFAULTS, "", problems)
    # the merged document always carries every key, so validation can run
    # even when unknown keys were found: all problems report in one pass
    _validate(merged, problems)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(sorted(problems)))
    return RunConfig(raw=merged)


def parse_config(path: str) -> RunConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}")
    return parse_config_dict(doc)
