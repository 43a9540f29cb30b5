"""Run configuration: JSON with documented defaults, strict key checking,
and a resolved echo that reloads to an identical config.

An "about" string is allowed at any level as a comment and ignored.
"""

from __future__ import annotations

import json


class ConfigError(ValueError):
    pass


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _fraction(v):
    return 0 < v <= 1


def _prob(v):
    return 0 <= v <= 1


class Field:
    __slots__ = ("default", "kind", "check", "constraint")

    def __init__(self, default, kind, check=None, constraint=""):
        self.default = default
        self.kind = kind
        self.check = check
        self.constraint = constraint


SCHEMA = {
    "world": {
        "n_classes": Field(8, int, lambda v: v == 8, "must be 8 (the defined pattern set)"),
        "canvas": Field(32, int, lambda v: v == 32, "must be 32 (the defined canvas)"),
        "channels": Field(4, int, lambda v: v >= 1, "must be >= 1"),
        "n_per_class": Field(2000, int, _positive, "must be >= 1"),
        "n_val_per_class": Field(200, int, _positive, "must be >= 1"),
        "n_eval_per_class": Field(200, int, _positive, "must be >= 1"),
        "noise_sigma": Field(0.02, float, _nonneg, "must be >= 0"),
        "seed": Field(101, int),
    },
    "msvq": {
        "v": Field(64, int, lambda v: v >= 2, "must be >= 2"),
        "schedule": Field([[1, 1], [2, 2], [4, 4], [8, 8], [16, 16], [32, 32]], list),
        "fit_samples_per_class": Field(50, int, _positive, "must be >= 1"),
        "refine_rounds": Field(2, int, _nonneg, "must be >= 0"),
        "kmeans_iters": Field(25, int, _positive, "must be >= 1"),
        "seed": Field(11, int),
    },
    "prior": {
        "width": Field(12, int, _positive, "must be >= 1"),
        "embed_dim": Field(16, int, _positive, "must be >= 1"),
        "blocks": Field(3, int, _positive, "must be >= 1"),
        "epochs": Field(3, int, _positive, "must be >= 1"),
        "batch": Field(64, int, _positive, "must be >= 1"),
        "base_rate": Field(3e-4, float, _positive, "must be > 0"),
        "warmup_epochs": Field(1, int, _nonneg, "must be >= 0"),
        "class_drop_p": Field(0.1, float, _prob, "must be in [0, 1]"),
        "temperature": Field(1.0, float, _positive, "must be > 0"),
        "top_k": Field(64, int, _positive, "must be >= 1"),
        "top_p": Field(0.96, float, _fraction, "must be in (0, 1]"),
        "cfg_scale": Field(0.0, float, _nonneg, "must be >= 0"),
        "seed": Field(21, int),
    },
    "lsrs": {
        "n_gen_per_class": Field(60, int, _positive, "must be >= 1"),
        "loss_kind": Field("pairwise", str, lambda v: v in ("pairwise", "pointwise"),
                           "must be pairwise|pointwise"),
        "epochs": Field(4, int, _positive, "must be >= 1"),
        "batch": Field(128, int, _positive, "must be >= 1"),
        "base_rate": Field(3e-4, float, _positive, "must be > 0"),
        "warmup_epochs": Field(1, int, _nonneg, "must be >= 0"),
        "val_fraction": Field(0.2, float, _fraction, "must be in (0, 1]"),
        "st": Field(2, int, _positive, "must be in [1, K+1]"),
        "m": Field(8, int, _positive, "must be >= 1"),
        "selection": Field("greedy", str, lambda v: v in ("greedy", "softmax-topk"),
                           "must be greedy|softmax-topk"),
        "k_sel": Field(2, int, _positive, "must be >= 1"),
        "exclude_first_scale": Field(False, bool),
        "embed_dim": Field(128, int, _positive, "must be >= 1"),
        "seed": Field(31, int),
    },
    "eval": {
        "extractor_seed": Field(97, int),
        "n_eval_samples": Field(400, int, _positive, "must be >= 1"),
        "seeds": Field([1, 2, 3], list, lambda v: len(v) >= 1, "must be nonempty"),
        "m_grid": Field([1, 2, 4, 8, 16, 32], list),
        "st_grid": Field([1, 2, 3, 4, 5, 6, 7], list),
        "ksel_grid": Field([1, 2, 4, 8], list),
        "timing_samples": Field(8, int, _positive, "must be >= 1"),
        "timing_reps": Field(3, int, _positive, "must be >= 1"),
        "ablation_samples": Field(200, int, _positive, "must be >= 1"),
        "sweep_samples": Field(400, int, _positive, "must be >= 1"),
    },
}


class Section:
    def __init__(self, name, values):
        self._name = name
        for k, v in values.items():
            setattr(self, k, v)
        self._values = values

    def as_dict(self):
        return dict(self._values)


class RunConfig:
    def __init__(self, sections):
        for name, values in sections.items():
            setattr(self, name, Section(name, values))
        self._sections = sections

    def as_dict(self):
        return {name: dict(values) for name, values in self._sections.items()}

    def echo_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(section, key, field: Field, value):
    if field.kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if field.kind is int and isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected int, got bool")
    if not isinstance(value, field.kind):
        raise ConfigError(
            f"{section}.{key}: expected {field.kind.__name__}, "
            f"got {type(value).__name__}"
        )
    if field.check is not None and not field.check(value):
        raise ConfigError(f"{section}.{key}: {field.constraint} (got {value!r})")
    return value


def resolve_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(SCHEMA) - {"about"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {}
    for name, fields in SCHEMA.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{name}: must be a JSON object")
        bad = set(given) - set(fields) - {"about"}
        if bad:
            raise ConfigError(f"{name}: unknown key(s) {sorted(bad)}")
        values = {}
        for key, field in fields.items():
            if key in given:
                values[key] = _coerce(name, key, field, given[key])
            else:
                values[key] = field.default
        sections[name] = values
    cfg = RunConfig(sections)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: RunConfig):
    sched = cfg.msvq.schedule
    if not sched or list(sched[0]) != [1, 1]:
        raise ConfigError("msvq.schedule: first scale must be [1, 1]")
    if list(sched[-1]) != [cfg.world.canvas, cfg.world.canvas]:
        raise ConfigError(
            f"msvq.schedule: last scale must match the canvas "
            f"[{cfg.world.canvas}, {cfg.world.canvas}]"
        )
    for a, b in zip(sched, sched[1:]):
        if a[0] * a[1] >= b[0] * b[1]:
            raise ConfigError(f"msvq.schedule: scales must strictly grow ({a} then {b})")
    k = len(sched)
    if not 1 <= cfg.lsrs.st <= k + 1:
        raise ConfigError(f"lsrs.st: must be in [1, {k + 1}] (got {cfg.lsrs.st})")
    if cfg.prior.top_k > cfg.msvq.v:
        raise ConfigError(
            f"prior.top_k: must be <= msvq.v = {cfg.msvq.v} (got {cfg.prior.top_k})"
        )
    if cfg.lsrs.n_gen_per_class > cfg.world.n_per_class:
        raise ConfigError(
            "lsrs.n_gen_per_class: must be <= world.n_per_class "
            f"(got {cfg.lsrs.n_gen_per_class} > {cfg.world.n_per_class})"
        )


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text.strip():
        raw = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return resolve_config(raw)


def default_config() -> RunConfig:
    return resolve_config({})
