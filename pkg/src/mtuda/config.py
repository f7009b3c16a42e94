"""Experiment configuration files.

Grammar (one item per line)::

    # comment
    [section]            ; experiment, optim, weights, mtkt, data, pl, domain.<name>
    key = value          ; ints, floats, true/false, or comma-separated lists

Keys are checked against a fixed schema; every problem is reported with its
line number. ``serialize`` writes every key, so ``parse(serialize(c)) == c``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

from mtuda import synth
from mtuda.errors import ValidationError
from mtuda.losses import AdvWeights
from mtuda.pseudo_label import PLStrategy
from mtuda.trainers import Method, TrainConfig

OUTPUT_DIR_ENV = "MTUDA_OUTPUT_DIR"


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _names(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _floats(text):
    return [float(p) for p in _names(text)]


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "method": (str, "MultiDis"),
        "representation": (str, "SelfInformation"),
        "seed": (int, 0),
        "iters": (int, 3000),
        "warmup_iters": (int, 500),
        "batch_size": (int, 4),
        "checkpoint_every": (int, 500),
        "output_dir": (str, "runs/experiment"),
    },
    "optim": {
        "seg_lr": (float, 2.5e-4),
        "seg_momentum": (float, 0.9),
        "seg_weight_decay": (float, 1e-4),
        "disc_lr": (float, 1e-4),
    },
    "weights": {
        "lambda_adv": (float, 0.001),
        "lambda_s": (float, 0.001),
        "lambda_t": (float, 0.001),
        "kl_weight": (float, 1.0),
    },
    "mtkt": {
        "agn_adversarial": (_bool, False),
        "agn_source_ce": (_bool, False),
    },
    "data": {
        "source": (str, "synth"),
        "targets": (_names, ["euro", "india"]),
        "transfer": (_names, []),
        "train_size": (int, 200),
        "val_size": (int, 50),
        "height": (int, 64),
        "width": (int, 64),
        "appearance_only": (_bool, True),
        "seed": (int, 0),
    },
    "pl": {
        "strategy": (str, "none"),
        "keep_fraction": (float, 0.5),
        "refine_iters": (int, 0),  # 0: a quarter of experiment.iters
    },
}

DOMAIN_KEYS = {
    "base": str,
    "palette": _floats,
    "hue_shift": float,
    "brightness": float,
    "noise_sigma": float,
    "class_frequency_bias": _floats,
    "texture_grain": int,
    "border": int,
}

# keys that do not change what training computes
_UNHASHED = {("experiment", "output_dir"), ("experiment", "checkpoint_every"), ("data", "transfer")}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)  # section -> key -> value
    domains: dict = field(default_factory=dict)  # name -> {key: value}

    def get(self, section, key):
        return self.values[section][key]

    # derived views ------------------------------------------------------

    def train_config(self) -> TrainConfig:
        e, o, w, m, d = (self.values[s] for s in ("experiment", "optim", "weights", "mtkt", "data"))
        return TrainConfig(
            method=Method.parse(e["method"]),
            representation=e["representation"],
            weights=AdvWeights(w["lambda_adv"], w["lambda_s"], w["lambda_t"]),
            iters=e["iters"],
            warmup_iters=e["warmup_iters"],
            batch_size=e["batch_size"],
            seg_lr=o["seg_lr"],
            seg_momentum=o["seg_momentum"],
            seg_weight_decay=o["seg_weight_decay"],
            disc_lr=o["disc_lr"],
            seed=e["seed"],
            T=len(d["targets"]),
            kl_weight=w["kl_weight"],
            agn_adversarial=m["agn_adversarial"],
            agn_source_ce=m["agn_source_ce"],
        )

    @property
    def output_dir(self) -> str:
        return os.environ.get(OUTPUT_DIR_ENV) or self.values["experiment"]["output_dir"]

    def domain_spec(self, name: str) -> synth.DomainSpec:
        if name in self.domains:
            d = dict(self.domains[name])
            spec = synth.spec_to_dict(synth.preset(d.pop("base", "synth")))
            if "palette" in d:
                d["palette"] = _rows(d["palette"])
            spec.update(d, domain_id=name)
            return synth.spec_from_dict(spec)
        return synth.preset(name)

    def target_spec(self, name: str) -> synth.DomainSpec:
        spec = self.domain_spec(name)
        if self.values["data"]["appearance_only"]:
            spec = synth.appearance_only(spec, self.domain_spec(self.values["data"]["source"]))
        return spec

    def config_hash(self) -> str:
        text = serialize(self, skip=_UNHASHED)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _rows(flat):
    if len(flat) != 21:
        raise ValueError("palette needs 21 numbers (7 RGB triples)")
    return [flat[i : i + 3] for i in range(0, 21, 3)]


def defaults() -> ExperimentConfig:
    return ExperimentConfig({s: {k: (list(v) if isinstance(v, list) else v) for k, (_, v) in keys.items()} for s, keys in SCHEMA.items()})


def parse(text: str, path: str = "<config>") -> ExperimentConfig:
    cfg = defaults()
    errors = []
    section, seen = None, set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                errors.append((lineno, f"malformed section header {line!r}"))
                continue
            section = line[1:-1].strip()
            if section.startswith("domain."):
                name = section[len("domain.") :]
                if not name:
                    errors.append((lineno, "empty domain name"))
                cfg.domains.setdefault(name, {})
            elif section not in SCHEMA:
                errors.append((lineno, f"unknown section [{section}]"))
            continue
        if "=" not in line:
            errors.append((lineno, f"expected 'key = value', got {line!r}"))
            continue
        key, value = (p.strip() for p in line.split("=", 1))
        if section is None:
            errors.append((lineno, f"key {key!r} outside any section"))
            continue
        if (section, key) in seen:
            errors.append((lineno, f"duplicate key {key!r} in [{section}]"))
            continue
        seen.add((section, key))
        if section.startswith("domain."):
            parser = DOMAIN_KEYS.get(key)
            target = cfg.domains[section[len("domain.") :]]
        else:
            parser = SCHEMA.get(section, {}).get(key, (None,))[0]
            target = cfg.values.get(section)
        if parser is None or target is None:
            errors.append((lineno, f"unknown key {key!r} in [{section}]"))
            continue
        try:
            target[key] = parser(value)
        except ValueError as exc:
            errors.append((lineno, f"{key}: {exc}"))
    if not errors:
        errors.extend(_semantic_errors(cfg))
    if errors:
        detail = "\n".join(f"{path}:{n}: {m}" for n, m in errors)
        raise ValidationError(detail, errors)
    return cfg


def _semantic_errors(cfg):
    out = []
    d = cfg.values["data"]
    if not d["targets"]:
        out.append((0, "data.targets must list at least one domain"))
    for name in [d["source"], *d["targets"], *d["transfer"]]:
        try:
            cfg.domain_spec(name)
        except Exception as exc:  # configuration problems of any kind
            out.append((0, f"domain {name!r}: {exc}"))
    if d["train_size"] < 1 or d["val_size"] < 1:
        out.append((0, "data.train_size and data.val_size must be positive"))
    pl = cfg.values["pl"]
    if pl["strategy"].lower() != "none":
        try:
            PLStrategy.parse(pl["strategy"])
        except Exception as exc:
            out.append((0, str(exc)))
    if not 0.0 < pl["keep_fraction"] <= 1.0:
        out.append((0, f"pl.keep_fraction must lie in (0, 1], got {pl['keep_fraction']}"))
    if pl["refine_iters"] < 0:
        out.append((0, "pl.refine_iters must be >= 0"))
    if not out:
        try:
            cfg.train_config()
        except Exception as exc:
            out.append((0, str(exc)))
    return out


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: ExperimentConfig, skip=()) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            if (section, key) not in skip:
                lines.append(f"{key} = {_fmt(cfg.values[section][key])}")
        lines.append("")
    for name in sorted(cfg.domains):
        lines.append(f"[domain.{name}]")
        for key in DOMAIN_KEYS:
            if key in cfg.domains[name]:
                lines.append(f"{key} = {_fmt(cfg.domains[name][key])}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse(fh.read(), str(path))
