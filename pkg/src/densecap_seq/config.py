"""Run configuration: one JSON file, dotted command-line overrides, and a
fully-resolved echo written next to the outputs.

The file holds five blocks: a top-level seed and worker count, plus
`corpus`, `dims`, `train`, and `paths` sections. Every field has a
default, unknown keys are rejected by name, and all randomness in a run
derives from the single top-level seed (the corpus section therefore may
not carry its own; the effective derived value still appears in the echo
for provenance).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .synthdata import CorpusSpec
from .training import REWARDS, ModelDims, STAGES, TrainConfig


class UsageError(ValueError):
    """Bad invocation or configuration; maps to exit code 1."""


@dataclass(frozen=True)
class TrainSection:
    """Stage-independent training knobs plus per-stage epoch counts."""

    epn_epochs: int = 10
    esgn_epochs: int = 24
    scn_epochs: int = 8
    rl_epochs: int = 4
    lr: float = 5e-4
    rl_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rollouts: int = 16
    reward: str = "cider"
    sample_events: bool = False
    temperature: float = 1.0
    clip_norm: float = 5.0

    def __post_init__(self):
        for name in ("epn_epochs", "esgn_epochs", "scn_epochs", "rl_epochs"):
            if getattr(self, name) < 0:
                raise UsageError(f"train.{name} must be >= 0")
        if self.reward not in REWARDS:
            raise UsageError(f"train.reward must be one of {REWARDS}")

    def build(self, stage: str, seed: int) -> TrainConfig:
        """Reward fine-tuning runs at its own, much smaller step size: the
        greedy reference-sequence baseline is rarely beaten, so advantages
        are one-sided and the supervised rate walks the policy off the
        learned captions instead of sharpening them."""
        if stage not in STAGES:
            raise UsageError(f"unknown stage {stage!r}; one of {STAGES}")
        return TrainConfig(
            stage=stage,
            epochs=getattr(self, f"{stage}_epochs"),
            lr=self.rl_lr if stage == "rl" else self.lr,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            seed=seed, rollouts=self.rollouts, reward=self.reward,
            sample_events=self.sample_events, temperature=self.temperature,
            clip_norm=self.clip_norm,
        )


@dataclass(frozen=True)
class PathsConfig:
    workdir: str = "run"
    corpus: str = "corpus.jsonl"

    def workdir_path(self) -> Path:
        return Path(self.workdir)

    def corpus_path(self) -> Path:
        p = Path(self.corpus)
        return p if p.is_absolute() else self.workdir_path() / p


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    workers: int = 1
    corpus: CorpusSpec = None
    dims: ModelDims = None
    train: TrainSection = None
    paths: PathsConfig = None

    def __post_init__(self):
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        if self.corpus is None:
            object.__setattr__(self, "corpus", CorpusSpec(seed=self.seed))
        if self.dims is None:
            object.__setattr__(self, "dims", ModelDims())
        if self.train is None:
            object.__setattr__(self, "train", TrainSection())
        if self.paths is None:
            object.__setattr__(self, "paths", PathsConfig())
        if self.corpus.seed != self.seed:
            raise UsageError("corpus seed is derived from the run seed")

    def to_dict(self) -> dict:
        # corpus.seed is omitted: it is derived from the run seed, and
        # keeping it out makes the dump loadable as a --config file
        corpus = {k: v for k, v in self.corpus.to_dict().items()
                  if k != "seed"}
        return {
            "seed": self.seed,
            "workers": self.workers,
            "corpus": corpus,
            "dims": self.dims.to_dict(),
            "train": {f.name: getattr(self.train, f.name)
                      for f in fields(self.train)},
            "paths": {f.name: getattr(self.paths, f.name)
                      for f in fields(self.paths)},
        }


_SECTIONS = {
    "corpus": CorpusSpec,
    "dims": ModelDims,
    "train": TrainSection,
    "paths": PathsConfig,
}


def _field_defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def _coerce(raw, default, where: str):
    """Fit a JSON value to the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(raw, bool):
            raise UsageError(f"{where}: expected true/false, got {raw!r}")
        return raw
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise UsageError(f"{where}: expected an integer, got {raw!r}")
        return raw
    if isinstance(default, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise UsageError(f"{where}: expected a number, got {raw!r}")
        return float(raw)
    if isinstance(default, str):
        if not isinstance(raw, str):
            raise UsageError(f"{where}: expected a string, got {raw!r}")
        return raw
    raise UsageError(f"{where}: field cannot be set from config")


def _build_section(name: str, cls, data: dict, seed: int):
    defaults = _field_defaults(cls)
    if name == "corpus":
        if "seed" in data:
            raise UsageError(
                "corpus.seed is derived from the run seed; set 'seed' instead"
            )
        defaults.pop("seed")
    unknown = set(data) - set(defaults)
    if unknown:
        raise UsageError(f"unknown {name} keys: {sorted(unknown)}")
    kwargs = {
        k: _coerce(v, defaults[k], f"{name}.{k}") for k, v in data.items()
    }
    if name == "corpus":
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise UsageError(f"invalid {name} section: {err}") from err


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    unknown = set(data) - {"seed", "workers", *_SECTIONS}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    seed = _coerce(data.get("seed", RunConfig.seed), RunConfig.seed, "seed")
    workers = _coerce(data.get("workers", RunConfig.workers),
                      RunConfig.workers, "workers")
    sections = {
        name: _build_section(name, cls, data.get(name, {}) or {}, seed)
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(seed=seed, workers=workers, **sections)


def parse_overrides(pairs) -> dict:
    """--key value pairs (dotted keys) into a nested dict."""
    nested: dict = {}
    for key, raw in pairs:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if not all(parts):
            raise UsageError(f"malformed override key {key!r}")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {key!r} conflicts with {part!r}")
        node[parts[-1]] = value
    return nested


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Read the optional JSON file, then apply dotted overrides on top."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path} is not valid JSON: {err}")
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    data = _merge(data, parse_overrides(overrides))
    return config_from_dict(data)


def echo_config(config: RunConfig, workdir) -> Path:
    """Write the fully-resolved config next to the run outputs."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    out = workdir / "config_resolved.json"
    out.write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return out
