"""Flat key=value configuration with a documented, closed key set.

A config file is plain text, one `key = value` per line, `#` comments.
Unknown keys are an error. `describe()` renders the full documented key list.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .env import EnvConfig
from .errors import ConfigError
from .hypernet import HypernetConfig
from .lang import Lexicon, build_lexicon
from .policy import PolicyArch

# key -> (default, type, doc)
DEFAULTS = {
    "lang.n_objects": (3, int, "number of instructed object concepts"),
    "lang.n_containers": (3, int, "number of container concepts"),
    "lang.surfaces": (60, int, "surface forms per concept (50 train + 10 held out)"),
    "lang.sigma_syn": (0.1, float, "synonym noise scale around each concept vector"),
    "lang.d_lang": (64, int, "language embedding dimension"),
    "lang.n_fillers": (2, int, "filler concepts appended to instructions"),
    "lang.seed": (0, int, "lexicon seed (embeddings regenerate from it)"),

    "env.n_distractors": (2, int, "inert distractor objects in the scene"),
    "env.eps_grasp": (0.03, float, "grasp reach radius"),
    "env.delta_place": (0.05, float, "placement success radius"),
    "env.a_max": (0.05, float, "per-axis movement bound per step"),
    "env.horizon": (200, int, "episode step limit"),
    "env.layout_mode": ("decorrelated", str, "reset layout: decorrelated | correlated"),
    "env.sigma_layout": (0.05, float, "object-position spread in correlated mode"),

    "data.n_demos": (100, int, "expert demonstrations per task"),

    "policy.hidden": (32, int, "target-policy hidden width"),
    "policy.n_hidden": (3, int, "target-policy hidden layer count"),

    "hypernet.d": (128, int, "token dimension inside the generator"),
    "hypernet.heads": (4, int, "attention heads per cross-attention"),
    "hypernet.win_blocks": (4, int, "transformer blocks in the initialization stage"),
    "hypernet.refine_steps": (3, int, "refinement steps T"),
    "hypernet.ff_mult": (2, int, "feed-forward hidden multiple of the token dim"),
    "hypernet.win_out_scale": (0.1, float, "initial scale of decoded coarse weights"),

    "train.model": ("disc", str, "model kind: disc | disc-no-win | disc-win-only | "
                                 "direct-hypernet | concat-mlp | film-mlp"),
    "train.steps": (20_000, int, "optimization steps"),
    "train.lr": (1e-4, float, "AdamW base learning rate (cosine annealed)"),
    "train.batch_size": (128, int, "transitions per batch"),
    "train.weight_decay": (1e-4, float, "decoupled weight decay"),
    "train.paraphrase": (True, bool, "re-draw training-split instructions per batch"),
    "train.tasks_per_batch": (3, int, "task subset size per batch (0 = all tasks)"),
    "train.checkpoint_every": (1000, int, "steps between checkpoints"),
    "train.grad_clip": (0.0, float, "global gradient-norm clip (0 = off)"),

    "eval.n_episodes": (30, int, "episodes per task in rollout evaluation"),
    "eval.split": ("train", str, "paraphrase split used at evaluation"),

    "adapt.k": (3, int, "demonstrations for few-shot adaptation"),
    "adapt.steps": (1000, int, "adaptation gradient steps"),
    "adapt.eta": (1e-3, float, "adaptation learning rate"),
    "adapt.checkpoints": ("0,50,200,500,1000", str, "evaluation checkpoints"),
    "adapt.init": ("hypernet", str, "initialization: hypernet | random"),

    "bench.n_trials": (1000, int, "timing samples per measurement"),
    "bench.warmup": (100, int, "discarded warm-up calls"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str):
    default, typ, _ = DEFAULTS[key]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


class Config(dict):
    @classmethod
    def default(cls) -> "Config":
        return cls({k: v for k, (v, _, _) in DEFAULTS.items()})

    @classmethod
    def load(cls, path) -> "Config":
        cfg = cls.default()
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = _coerce(key, raw)
        return cfg

    def override(self, **pairs) -> "Config":
        out = Config(self)
        for key, value in pairs.items():
            key = key.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = value
        return out

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(dict(self), sort_keys=True).encode()).hexdigest()[:16]


def describe() -> str:
    lines = []
    for key, (default, typ, doc) in DEFAULTS.items():
        lines.append(f"{key} = {default}  # ({typ.__name__}) {doc}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# object builders
# ---------------------------------------------------------------------------

def make_lexicon(cfg: Config) -> Lexicon:
    return build_lexicon(n_objects=cfg["lang.n_objects"],
                         n_containers=cfg["lang.n_containers"],
                         surfaces=cfg["lang.surfaces"],
                         sigma_syn=cfg["lang.sigma_syn"],
                         d_lang=cfg["lang.d_lang"],
                         seed=cfg["lang.seed"],
                         n_fillers=cfg["lang.n_fillers"])


def make_env(cfg: Config, layout_mode: str | None = None) -> EnvConfig:
    return EnvConfig(n_objects=cfg["lang.n_objects"],
                     n_containers=cfg["lang.n_containers"],
                     n_distractors=cfg["env.n_distractors"],
                     eps_grasp=cfg["env.eps_grasp"],
                     delta_place=cfg["env.delta_place"],
                     a_max=cfg["env.a_max"],
                     horizon=cfg["env.horizon"],
                     layout_mode=layout_mode or cfg["env.layout_mode"],
                     sigma_layout=cfg["env.sigma_layout"])


def make_arch(cfg: Config) -> PolicyArch:
    env = make_env(cfg)
    dims = (env.obs_dim,) + (cfg["policy.hidden"],) * cfg["policy.n_hidden"] + (env.act_dim,)
    return PolicyArch(dims)


def make_hypernet_config(cfg: Config) -> HypernetConfig:
    return HypernetConfig(arch=make_arch(cfg),
                          d_lang=cfg["lang.d_lang"],
                          d=cfg["hypernet.d"],
                          heads=cfg["hypernet.heads"],
                          win_blocks=cfg["hypernet.win_blocks"],
                          refine_steps=cfg["hypernet.refine_steps"],
                          ff_mult=cfg["hypernet.ff_mult"],
                          win_out_scale=cfg["hypernet.win_out_scale"])


def adapt_checkpoints(cfg: Config) -> list:
    try:
        return [int(s) for s in cfg["adapt.checkpoints"].split(",") if s.strip()]
    except ValueError:
        raise ConfigError(
            f"adapt.checkpoints must be comma-separated integers, "
            f"got {cfg['adapt.checkpoints']!r}") from None
