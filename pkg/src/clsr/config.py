"""Run configuration: a flat ``key=value`` text file with typed validation.

Precedence, lowest first: built-in defaults, the config file, then each
``--set key=value`` override in command-line order.  Blank lines and lines
starting with ``#`` are ignored.  Tuple values (``pred_hidden``,
``behaviors``) are written space-separated; commas are reserved for sweep
lists.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ClsrConfig
from .train import TrainSettings

OUTPUT_ROOT_ENV = "CLSR_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split())


def _words(text: str) -> tuple:
    return tuple(text.split())


def _opt_int(text: str):
    return None if text.strip() in ("", "none") else int(text)


def _opt_str(text: str):
    return None if text.strip() in ("", "none") else text.strip()


@dataclass(frozen=True)
class RunConfig:
    # model
    d: int = 40
    k: int = 3
    l_t: int = 5
    beta: float = 0.1
    l2: float = 1e-6
    margin: float = 1.0
    contrastive: str = "triplet"
    rnn_cell: str = "time_lstm"
    attention: str = "mlp"
    evolution: bool = True
    fusion_gru: bool = True
    max_seq_len: int = 50
    pred_hidden: tuple = (100, 64)
    # optimization
    lr: float = 1e-3
    batch_size: int = 500
    epochs: int = 10
    patience: int = 3
    train_negatives: int = 4
    eval_negatives: int = 99
    max_steps: int = 0
    # data
    data: str | None = None
    format: str | None = None
    behaviors: tuple = ("click",)
    drivers: str | None = None
    core: int = 0
    t_val: int | None = None
    t_test: int | None = None
    val_frac: float = 0.8
    test_frac: float = 0.9
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        problems = []
        for name in ("batch_size", "train_negatives", "eval_negatives"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("epochs", "patience", "max_steps", "core"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.format not in (None, "csv", "tsv"):
            problems.append("format must be csv or tsv")
        if not 0.0 < self.val_frac < self.test_frac < 1.0:
            problems.append("need 0 < val_frac < test_frac < 1")
        if (self.t_val is None) != (self.t_test is None):
            problems.append("t_val and t_test must be given together")
        elif self.t_val is not None and not self.t_val < self.t_test:
            problems.append("t_val must be < t_test")
        if not self.behaviors:
            problems.append("behaviors must name at least one tag")
        if problems:
            raise ConfigError("; ".join(problems))

    def model_config(self) -> ClsrConfig:
        return ClsrConfig.from_dict({f.name: getattr(self, f.name) for f in fields(self)})

    def train_settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                             patience=self.patience, seed=self.seed,
                             train_negatives=self.train_negatives,
                             eval_negatives=self.eval_negatives, max_steps=self.max_steps)

    def output_dir(self) -> Path:
        """``out_dir``; a relative one is placed under ``$CLSR_OUTPUT_ROOT`` when that is set."""
        out = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in self.to_dict().items())

    def with_updates(self, updates: dict) -> "RunConfig":
        return from_mapping(updates, base=self)


_PARSERS = {
    "pred_hidden": _ints,
    "behaviors": _words,
    "data": _opt_str,
    "format": _opt_str,
    "drivers": _opt_str,
    "t_val": _opt_int,
    "t_test": _opt_int,
}
for _f in fields(RunConfig):
    if _f.name not in _PARSERS:
        _PARSERS[_f.name] = {"int": int, "float": float, "bool": _bool, "str": str}[_f.type]

KEYS = tuple(f.name for f in fields(RunConfig))


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_lines(lines, source: str = "<config>") -> dict:
    """``{key: raw text}`` in file order; duplicate keys are an error."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        if key.strip() not in _PARSERS:
            raise ConfigError(f"unknown config key {key.strip()!r}")
        out[key.strip()] = value
    return out


def from_mapping(raw: dict, base: RunConfig | None = None) -> RunConfig:
    values = base.to_dict() if base is not None else {}
    for key, text in raw.items():
        values[key] = parse_value(key, text) if isinstance(text, str) else text
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load(path=None, overrides=None) -> RunConfig:
    """Defaults, then ``path`` (if any), then ``overrides`` (``key=value`` strings)."""
    raw = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        raw.update(parse_lines(text.splitlines(), str(path)))
    raw.update(parse_overrides(overrides))
    return from_mapping(raw)


def expand_sweep(raw: dict) -> list[dict]:
    """Cartesian product over comma-separated values, keys in their given order.

    ``{"lr": "0.01,0.03", "beta": "0,0.1"}`` yields four mappings with lr
    varying slowest.
    """
    keys = list(raw)
    choices = [[v.strip() for v in raw[k].split(",")] for k in keys]
    for k, c in zip(keys, choices):
        if any(v == "" for v in c):
            raise ConfigError(f"empty value in sweep list for {k!r}")
    return [dict(zip(keys, combo)) for combo in itertools.product(*choices)]
