"""Flat ``key = value`` run configuration with strict parsing.

Every key has a parser and a default. Unknown keys, malformed values and
constraint violations raise :class:`ConfigError` naming the key and, when
the value came from a file, the line it was on.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..datastream import (
    TaskStream,
    apply_longtail,
    load_csv_dataset,
    make_synthetic_gaussians,
    split_b0,
    split_b50,
)
from ..losses import LossWeights
from ..pipelines import KINDS, PipelineConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or '<config>'}:{line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")
        self.key = key
        self.line = line


# ------------------------------------------------------------------ value parsers

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(p) for p in text.split(",") if p.strip()) if text else ()


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1..5"`` is inclusive; ``"3,7,9"`` is an explicit list."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(p) for p in text.split("..", 1))
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    seeds = _int_list(text)
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {value!r}")
        return value
    return parse


def _str(text: str) -> str:
    return text.strip()


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key: (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "dataset.kind": (_choice("synthetic", "csv"), "synthetic"),
    "dataset.path": (_str, ""),
    "dataset.test_path": (_str, ""),
    "dataset.features": (int, 0),
    "dataset.scale": (_bool, True),
    "dataset.n_classes": (int, 10),
    "dataset.per_class": (int, 1000),
    "dataset.dim": (int, 20),
    "dataset.spread": (float, 1.0),
    "dataset.test_fraction": (float, 0.5),
    "protocol": (_choice("b0", "b50"), "b0"),
    "protocol.steps": (int, 5),
    "protocol.base_classes": (int, 50),
    "protocol.step_size": (int, 10),
    "longtail.enabled": (_bool, False),
    "longtail.factor": (float, 100.0),
    "longtail.mode": (_choice("ordered", "shuffled"), "ordered"),
    "memory.policy": (_choice("per_class", "fixed_total"), "per_class"),
    "memory.size": (int, 20),
    "model.hidden": (_int_list, (64,)),
    "model.feature_dim": (int, 32),
    "pipeline.kind": (_choice(*KINDS), "MAF"),
    "pipeline.drc": (_bool, True),
    "pipeline.adaptation_epochs": (int, 20),
    "pipeline.fusion_epochs": (int, 40),
    "pipeline.batch_size": (int, 64),
    "pipeline.lr": (float, 0.01),
    "pipeline.momentum": (float, 0.9),
    "pipeline.weight_decay": (float, 0.0),
    "loss.alpha": (float, 0.2),
    "loss.beta": (float, 4.0),
    "loss.temperature": (float, 2.0),
    "loss.tro": (float, 1.2),
    "loss.la": (_bool, False),
    "seed": (int, 0),
    "seeds": (parse_seeds, (0, 1, 2, 3, 4)),
    "output.dir": (_str, "results"),
}


def _positive(*keys):
    return [(k, lambda v: v > 0, "must be positive") for k in keys]


CONSTRAINTS = [
    ("loss.alpha", lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    ("loss.beta", lambda v: v >= 0.0, "must be non-negative"),
    ("loss.tro", lambda v: v >= 0.0, "must be non-negative"),
    ("pipeline.momentum", lambda v: 0.0 <= v < 1.0, "must lie in [0, 1)"),
    ("pipeline.weight_decay", lambda v: v >= 0.0, "must be non-negative"),
    ("memory.size", lambda v: v >= 0, "must be non-negative"),
    ("longtail.factor", lambda v: v >= 1.0, "must be at least 1"),
    ("dataset.test_fraction", lambda v: 0.0 < v < 1.0, "must lie in (0, 1)"),
    ("dataset.spread", lambda v: v >= 0.0, "must be non-negative"),
    ("model.hidden", lambda v: all(w > 0 for w in v), "widths must be positive"),
    *_positive(
        "loss.temperature", "pipeline.lr", "pipeline.batch_size", "pipeline.adaptation_epochs",
        "pipeline.fusion_epochs", "protocol.steps", "model.feature_dim", "dataset.n_classes",
        "dataset.per_class", "dataset.dim",
    ),
]


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})
    lines: dict[str, int] = field(default_factory=dict, compare=False)
    source: str | None = field(default=None, compare=False)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # -------------------------------------------------------------- editing

    def set(self, key: str, text: str, line: int | None = None) -> None:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key", line, self.source)
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(key, str(exc), line, self.source) from None
        if line is not None:
            self.lines[key] = line

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        out = RunConfig(dict(self.values), dict(self.lines), self.source)
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(pair, "override must look like key=value")
            key, text = pair.split("=", 1)
            out.set(key.strip(), text)
            out.lines.pop(key.strip(), None)
        out.validate()
        return out

    def validate(self) -> "RunConfig":
        for key, ok, message in CONSTRAINTS:
            if not ok(self.values[key]):
                raise ConfigError(key, f"{message}, got {self.values[key]!r}", self.lines.get(key), self.source)
        if self.values["dataset.kind"] == "csv":
            for key in ("dataset.path", "dataset.features"):
                if not self.values[key]:
                    raise ConfigError(key, "required when dataset.kind = csv", self.lines.get(key), self.source)
        return self

    # -------------------------------------------------------------- serialization

    def serialize(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    def as_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    # -------------------------------------------------------------- builders

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(
            alpha=v["loss.alpha"], beta=v["loss.beta"], temperature=v["loss.temperature"],
            tro=v["loss.tro"], la_enabled=v["loss.la"],
        )

    def pipeline_config(self, seed: int | None = None) -> PipelineConfig:
        v = self.values
        return PipelineConfig(
            kind=v["pipeline.kind"],
            drc_enabled=v["pipeline.drc"],
            adaptation_epochs=v["pipeline.adaptation_epochs"],
            fusion_epochs=v["pipeline.fusion_epochs"],
            batch_size=v["pipeline.batch_size"],
            lr=v["pipeline.lr"],
            momentum=v["pipeline.momentum"],
            weight_decay=v["pipeline.weight_decay"],
            hidden=tuple(v["model.hidden"]),
            feature_dim=v["model.feature_dim"],
            memory_policy=v["memory.policy"],
            memory_size=v["memory.size"],
            loss=self.loss_weights(),
            seed=v["seed"] if seed is None else seed,
        )

    def build_stream(self, seed: int | None = None) -> TaskStream:
        v = self.values
        seed = v["seed"] if seed is None else seed
        n = v["dataset.n_classes"]
        test = None
        if v["dataset.kind"] == "synthetic":
            samples = make_synthetic_gaussians(n, v["dataset.per_class"], v["dataset.dim"], v["dataset.spread"], seed=seed)
        else:
            samples = load_csv_dataset(v["dataset.path"], v["dataset.features"], scale=v["dataset.scale"])
            if v["dataset.test_path"]:
                test = load_csv_dataset(v["dataset.test_path"], v["dataset.features"], scale=v["dataset.scale"])
            labels = {s.label for s in samples}
            if labels != set(range(n)):
                raise ConfigError("dataset.n_classes", f"dataset has labels {sorted(labels)[:12]}..., expected 0..{n - 1}")
        if v["protocol"] == "b0":
            stream = split_b0(samples, n, v["protocol.steps"], seed, test, v["dataset.test_fraction"])
        else:
            stream = split_b50(samples, n, v["protocol.base_classes"], v["protocol.step_size"], seed, test, v["dataset.test_fraction"])
        if v["longtail.enabled"]:
            stream = apply_longtail(stream, v["longtail.factor"], v["longtail.mode"], seed)
        return stream


def parse_text(text: str, source: str | None = None) -> RunConfig:
    cfg = RunConfig(source=source)
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, "expected key = value", number, source)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in cfg.lines:
            raise ConfigError(key, f"duplicate key (first set on line {cfg.lines[key]})", number, source)
        cfg.set(key, value, number)
    return cfg.validate()


def parse_config(path) -> RunConfig:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))

