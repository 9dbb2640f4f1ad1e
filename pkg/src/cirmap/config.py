"""Run configuration: strict JSON parsing, defaults, and the resolved echo.

Unknown keys are rejected at every level so a typoed hyperparameter can never
silently fall back to a default. Seeds left null resolve from the top-level
seed; the composer seed must agree between the world and train sections since
both sides must build the identical frozen encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from . import fileio
from .composer import PRNG_NAME
from .errors import ConfigError
from .training import TrainConfig
from .worldgen import WorldSpec

# JSON key -> dataclass attribute renames (python keywords).
_TRAIN_ALIASES = {"lambda": "lam"}


@dataclass
class EvalConfig:
    gamma: float = 0.6
    metrics: list[str] = field(default_factory=lambda: ["recall", "map"])
    k_values: list[int] = field(default_factory=lambda: [1, 5, 10])
    slerp_t: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"eval.gamma must lie in [0, 1], got {self.gamma}")
        unknown = set(self.metrics) - {"recall", "map"}
        if unknown:
            raise ConfigError(f"unknown metrics: {sorted(unknown)}")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ConfigError("eval.k_values must be positive integers")


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "run"


@dataclass
class RunConfig:
    seed: int
    world: WorldSpec
    train: TrainConfig
    eval: EvalConfig
    paths: PathsConfig


def _build_section(name: str, cls, doc: dict, aliases: dict[str, str] | None = None):
    aliases = aliases or {}
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        attr = aliases.get(key, key)
        if attr not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    allowed = {"seed", "world", "train", "eval", "paths"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = doc.get("seed")
    if not isinstance(seed, int):
        raise ConfigError("config requires an integer top-level seed")

    world_doc = dict(doc.get("world", {}))
    train_doc = dict(doc.get("train", {}))
    eval_doc = dict(doc.get("eval", {}))
    paths_doc = dict(doc.get("paths", {}))
    for section in (world_doc, train_doc, eval_doc, paths_doc):
        if not isinstance(section, dict):
            raise ConfigError("config sections must be JSON objects")

    # Seed resolution: absent section seeds derive from the top-level seed.
    world_doc.setdefault("seed", seed)
    world_doc.setdefault("composer_seed", seed)
    train_doc.setdefault("seed", seed)
    train_doc.setdefault("composer_seed", world_doc["composer_seed"])

    world = _build_section("world", WorldSpec, world_doc)
    train_doc.setdefault("dim", world.dim)
    train_doc.setdefault("hidden", 4 * int(train_doc["dim"]))
    train = _build_section("train", TrainConfig, train_doc, aliases=_TRAIN_ALIASES)
    eval_cfg = _build_section("eval", EvalConfig, eval_doc)
    paths = _build_section("paths", PathsConfig, paths_doc)

    if train.dim != world.dim:
        raise ConfigError(f"train.dim {train.dim} != world.dim {world.dim}")
    if train.composer_seed != world.composer_seed:
        raise ConfigError(
            f"train.composer_seed {train.composer_seed} != world.composer_seed "
            f"{world.composer_seed}"
        )
    return RunConfig(seed=seed, world=world, train=train, eval=eval_cfg, paths=paths)


def load_config(path: Path, seed_override: int | None = None) -> RunConfig:
    doc = fileio.read_json(Path(path))
    if seed_override is not None:
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        doc = dict(doc)
        doc["seed"] = seed_override
        for section in ("world", "train"):
            if isinstance(doc.get(section), dict):
                sub = dict(doc[section])
                sub.pop("seed", None)
                sub.pop("composer_seed", None)
                doc[section] = sub
    return parse_config(doc)


def resolved_dict(config: RunConfig) -> dict:
    """Fully resolved config (defaults filled) for the on-disk echo."""
    world = {f.name: getattr(config.world, f.name) for f in fields(WorldSpec)}
    train = {}
    for f in fields(TrainConfig):
        key = "lambda" if f.name == "lam" else f.name
        train[key] = getattr(config.train, f.name)
    return {
        "seed": config.seed,
        "prng": PRNG_NAME,
        "world": world,
        "train": train,
        "eval": {
            "gamma": config.eval.gamma,
            "metrics": list(config.eval.metrics),
            "k_values": list(config.eval.k_values),
            "slerp_t": config.eval.slerp_t,
        },
        "paths": {"data_dir": config.paths.data_dir, "run_dir": config.paths.run_dir},
    }


def echo_config(config: RunConfig, out_path: Path) -> None:
    fileio.write_json(Path(out_path), resolved_dict(config))
