"""Run configuration: INI file with sections, overridable by CLI flags.

Every run artifact records the hash of the effective config, so reports are
traceable to the exact parameter set that produced them.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, fields

from .kinematics import KinematicChain, default_chain


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    seed: int = 7
    out_dir: str = "."
    jobs: int = 1
    chain_path: str = ""
    dataset: str = "dataset.jsonl"
    # diffusion
    t_a: int = 16
    k: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.2
    hidden: tuple = (256, 256, 256)
    embed_dim: int = 16
    # training
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-4  # desk-scale rate; the paper's 1e-4 is a fine-tuning rate
    lam: float = 1.0
    delta: float = 0.10
    # generation
    count: int = 120
    episode_steps: int = 80
    epsilon: float = 0.10
    # planner
    planner_margin: float = 0.01
    rrt_step: float = 0.1
    goal_bias: float = 0.1
    max_nodes: int = 5000
    edge_resolution: float = 0.01
    shortcut_attempts: int = 200
    ik_tol: float = 0.005
    # evaluation
    level: str = "small"
    chunks_per_episode: int = 5
    bootstrap_b: int = 2000
    ssr_pairs: tuple = ((0.02, 0.10), (0.05, 0.15))
    # ablation / data scaling
    ablate_deltas: tuple = (0.05, 0.10, 0.15)
    ablate_lambdas: tuple = (1.0, 4.0)
    sizes: tuple = (40, 80, 120)

    def validate(self):
        checks = [
            (self.t_a >= 1, "t_a must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (0.0 < self.beta_start <= self.beta_end < 1.0,
             "need 0 < beta_start <= beta_end < 1"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0.0, "lr must be > 0"),
            (self.lam >= 0.0, "lambda must be >= 0"),
            (self.delta > 0.0, "delta must be > 0"),
            (self.count >= 1, "count must be >= 1"),
            (self.episode_steps >= 2, "episode_steps must be >= 2"),
            (self.epsilon > 0.0, "epsilon must be > 0"),
            (self.level in ("small", "large"), f"unknown level {self.level!r}"),
            (self.chunks_per_episode >= 1, "chunks_per_episode must be >= 1"),
            (self.bootstrap_b >= 1, "bootstrap_b must be >= 1"),
            (self.jobs >= 1, "jobs must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


_SECTIONS = {
    "run": ("seed", "out_dir", "jobs", "chain_path", "dataset"),
    "diffusion": ("t_a", "k", "beta_start", "beta_end", "hidden", "embed_dim"),
    "training": ("steps", "batch_size", "lr", "lam", "delta"),
    "generation": ("count", "episode_steps", "epsilon"),
    "planner": ("planner_margin", "rrt_step", "goal_bias", "max_nodes",
                "edge_resolution", "shortcut_attempts", "ik_tol"),
    "evaluation": ("level", "chunks_per_episode", "bootstrap_b", "ssr_pairs"),
    "ablate": ("ablate_deltas", "ablate_lambdas"),
    "datascale": ("sizes",),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _to_str(name, value):
    if name == "ssr_pairs":
        return ",".join(f"{a!r}:{b!r}" for a, b in value)
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _from_str(name, text):
    default = getattr(RunConfig(), name)
    if name == "ssr_pairs":
        pairs = []
        for part in text.split(","):
            a, b = part.split(":")
            pairs.append((float(a), float(b)))
        return tuple(pairs)
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        return tuple(elem(v) for v in text.split(",")) if text else ()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def save_config(cfg, path):
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {n: _to_str(n, getattr(cfg, n)) for n in names}
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path=None):
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    known = {n for names in _SECTIONS.values() for n in names}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, text in parser[section].items():
            if name not in known:
                raise ConfigError(f"unknown config key {name!r} in [{section}]")
            setattr(cfg, name, _from_str(name, text))
    return cfg


_NON_SEMANTIC = {"out_dir", "dataset", "chain_path", "jobs"}  # where, not what


def config_hash(cfg):
    doc = {f.name: _to_str(f.name, getattr(cfg, f.name))
           for f in fields(RunConfig) if f.name not in _NON_SEMANTIC}
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def load_chain(cfg):
    if not cfg.chain_path:
        return default_chain()
    with open(cfg.chain_path) as fh:
        return KinematicChain.from_dict(json.load(fh))
