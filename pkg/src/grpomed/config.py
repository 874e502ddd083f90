"""Experiment configuration: one JSON document, one object per module.

Example::

    {
      "label": "default",
      "seed": 0,
      "output_dir": "runs/default",
      "cohort": {"n_patients": 32, "horizon": 20},
      "fusion": {"hidden": 8, "n_heads": 2, "kernel_width": 3},
      "clustering": {"n_groups": 3},
      "grpo": {"iterations": 150},
      "ga": {}, "mcts": {}, "ablation": {}, "gradcheck": {}
    }

Every section is optional; missing keys take the dataclass defaults. Module
seeds (cohort, GA, MCTS) are derived from the master seed unless a section
sets its own ``seed``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cohort_env import CohortConfig
from .errors import ConfigError
from .grpo_optimizer import GrpoConfig
from .strategy_search import GaConfig, MctsConfig


def derive_seed(master, name):
    """64-bit seed for one module, independent of every other module's draws."""
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class FusionConfig:
    hidden: int = 8
    n_heads: int = 2
    kernel_width: int = 3

    def __post_init__(self):
        if self.hidden < 1 or self.n_heads < 1 or self.kernel_width < 1:
            raise ConfigError("fusion sizes must be >= 1")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")


@dataclass
class ClusteringConfig:
    n_groups: int = 3
    embed_dim: int = 4
    phi_hidden: int = 16
    max_iters: int = 100
    n_init: int = 8

    def __post_init__(self):
        if self.n_groups < 1 or self.embed_dim < 1 or self.phi_hidden < 1:
            raise ConfigError("clustering sizes must be >= 1")
        if self.max_iters < 1 or self.n_init < 1:
            raise ConfigError("max_iters and n_init must be >= 1")


@dataclass
class AblationConfig:
    n_seeds: int = 5
    alpha3_values: tuple = (0.0, 0.1, 0.5)
    ppo_iterations: int = 2

    def __post_init__(self):
        self.alpha3_values = tuple(float(a) for a in self.alpha3_values)
        if self.n_seeds < 1 or self.ppo_iterations < 1:
            raise ConfigError("n_seeds and ppo_iterations must be >= 1")


@dataclass
class GradcheckConfig:
    points: int = 3
    series_length: int = 4
    batch: int = 16
    tolerance: float = 1e-4


SECTIONS = {
    "cohort": CohortConfig,
    "fusion": FusionConfig,
    "clustering": ClusteringConfig,
    "grpo": GrpoConfig,
    "ga": GaConfig,
    "mcts": MctsConfig,
    "ablation": AblationConfig,
    "gradcheck": GradcheckConfig,
}
SEEDED = ("cohort", "ga", "mcts")
TOP_LEVEL = ("label", "seed", "output_dir", "workers")


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    mcts: MctsConfig = field(default_factory=MctsConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    seed: int = 0
    label: str = "run"
    output_dir: str = "runs/run"
    workers: int = 1

    def module_seed(self, name):
        return derive_seed(self.seed, name)

    def to_dict(self):
        d = {name: _plain(asdict(getattr(self, name))) for name in SECTIONS}
        d.update(seed=self.seed, label=self.label, output_dir=self.output_dir, workers=self.workers)
        return d

    def with_seed(self, seed):
        """Same experiment under another master seed (module seeds re-derived)."""
        raw = self.to_dict()
        for name in SEEDED:
            raw[name].pop("seed", None)
        raw["seed"] = int(seed)
        return from_dict(raw)


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


class _Locator:
    """Maps config keys back to line numbers in the source text."""

    def __init__(self, text, path):
        self.text = text
        self.path = path

    def line_of(self, *keys):
        pos = 0
        line = None
        for key in keys:
            m = re.compile(r'"%s"\s*:' % re.escape(key)).search(self.text, pos)
            if m is None:
                break
            pos = m.end()
            line = self.text.count("\n", 0, m.start()) + 1
        return line

    def error(self, msg, *keys):
        line = self.line_of(*keys) if keys else None
        where = f"{self.path}:{line}" if line else f"{self.path}"
        key = ".".join(keys)
        return ConfigError(f"{where}: {key + ': ' if key else ''}{msg}")


def from_dict(raw, locator=None):
    loc = locator or _Locator("", "<config>")
    if not isinstance(raw, dict):
        raise loc.error("top level must be a JSON object")
    unknown = set(raw) - set(SECTIONS) - set(TOP_LEVEL)
    if unknown:
        key = sorted(unknown)[0]
        raise loc.error(f"unknown key (allowed: {', '.join(sorted(set(SECTIONS) | set(TOP_LEVEL)))})", key)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2**64:
        raise loc.error("seed must be an unsigned 64-bit integer", "seed")
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise loc.error("workers must be an integer >= 1", "workers")
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise loc.error("must be a JSON object", name)
        allowed = {f.name for f in fields(cls)}
        for key in section:
            if key not in allowed:
                raise loc.error(f"unknown key (allowed: {', '.join(sorted(allowed))})", name, key)
        values = dict(section)
        if name in SEEDED and "seed" not in values:
            values["seed"] = derive_seed(seed, name)
        try:
            kwargs[name] = cls(**values)
        except ConfigError as e:
            key = next((k for k in section if k in str(e)), None)
            raise loc.error(str(e), *([name, key] if key else [name])) from None
        except (TypeError, ValueError) as e:
            raise loc.error(f"invalid value ({e})", name) from None
    return ExperimentConfig(
        **kwargs,
        seed=seed,
        label=str(raw.get("label", "run")),
        output_dir=str(raw.get("output_dir", "runs/run")),
        workers=workers,
    )


def load_config(path):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    return from_dict(raw, _Locator(text, str(path)))


def dumps_json(obj):
    """Canonical JSON used for every file the package writes."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"
