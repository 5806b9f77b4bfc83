"""Trainable model wrappers sharing one interface.

Every model exposes:
  - params: dict[name -> Tensor] of trainable parameters
  - loss_on_batch(batch, lex) -> scalar loss Tensor (graph attached)
  - act_fn(instr, lex) -> callable(obs) -> action, no-grad fast path
  - clear_cache(): drop generated-policy caches after a parameter update

Generator models (DISC and variants, direct hypernet) produce full target
policies from the instruction embedding and run the compact policy on
observations; entangled baselines consume [obs, pooled embedding] directly.
"""

from __future__ import annotations

import numpy as np

from . import hypernet as H
from . import tensor as T
from .errors import ContractError
from .lang import Instruction, Lexicon, encode_instruction
from .policy import (PolicyArch, param_count, policy_forward, policy_forward_np,
                     serialize_sections, deserialize_sections)


class Model:
    kind = "base"

    def __init__(self):
        self.params: dict = {}
        self._cache: dict = {}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def clear_cache(self) -> None:
        self._cache.clear()

    def loss_on_batch(self, batch, lex: Lexicon) -> T.Tensor:
        raise NotImplementedError

    def act_fn(self, instr: Instruction, lex: Lexicon):
        raise NotImplementedError

    # checkpointing -----------------------------------------------------
    def state_sections(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(serialize_sections(self.state_sections(), kind=self.kind))

    def load(self, path) -> None:
        with open(path, "rb") as f:
            sections, kind = deserialize_sections(f.read())
        if kind != self.kind:
            raise ContractError(f"checkpoint kind {kind!r} does not match model {self.kind!r}")
        for name, p in self.params.items():
            if name not in sections:
                raise ContractError(f"checkpoint missing section {name!r}")
            if sections[name].shape != p.data.shape:
                raise ContractError(f"section {name!r} shape mismatch")
            p.data = sections[name]
        self.clear_cache()

    def params_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


class GeneratorModel(Model):
    """Common machinery for models that emit full target-policy parameters."""

    def __init__(self, arch: PolicyArch):
        super().__init__()
        self.arch = arch

    def generate_batch(self, embs) -> T.Tensor:
        raise NotImplementedError

    def generate_flat(self, instr: Instruction, lex: Lexicon) -> np.ndarray:
        """Generate once per (task, surface); rollouts reuse the cached policy."""
        key = (instr.task, instr.surface_ids)
        if key not in self._cache:
            emb = encode_instruction(instr, lex)
            self._cache[key] = self.generate_batch([emb]).data.ravel().copy()
        return self._cache[key]

    def act_fn(self, instr: Instruction, lex: Lexicon):
        flat = self.generate_flat(instr, lex)
        arch = self.arch
        return lambda obs: policy_forward_np(obs, flat, arch)[0]

    def loss_on_batch(self, batch, lex: Lexicon) -> T.Tensor:
        """Batch-wide MSE; one generation per distinct instruction in the batch."""
        embs = [encode_instruction(instr, lex) for instr, _ in batch.groups]
        theta = self.generate_batch(embs)
        p_total = param_count(self.arch)
        preds, targets = [], []
        for b, (_, idx) in enumerate(batch.groups):
            row = T.slice_(theta, b, b + 1, 0, p_total)
            preds.append(policy_forward(T.Tensor(batch.obs[idx]), row, self.arch))
            targets.append(batch.act[idx])
        return T.mse(T.concat(preds, axis=0), T.Tensor(np.concatenate(targets, axis=0)))


class DiscModel(GeneratorModel):
    """Two-stage generator; `variant` selects the full model or an ablation.

    - "full": WIN initialization + refinement steps
    - "win-only": WIN with zero refinement steps
    - "no-win": learned task-independent initial vector + refinement
    """

    def __init__(self, cfg: H.HypernetConfig, rng: np.random.Generator,
                 variant: str = "full"):
        super().__init__(cfg.arch)
        if variant not in ("full", "win-only", "no-win"):
            raise ContractError(f"unknown DISC variant {variant!r}")
        self.variant = variant
        if variant == "win-only":
            cfg = H.HypernetConfig(arch=cfg.arch, d_lang=cfg.d_lang, d=cfg.d,
                                   heads=cfg.heads, win_blocks=cfg.win_blocks,
                                   refine_steps=0, ff_mult=cfg.ff_mult,
                                   win_out_scale=cfg.win_out_scale)
        self.cfg = cfg
        self.kind = {"full": "disc", "win-only": "disc-win-only",
                     "no-win": "disc-no-win"}[variant]
        if variant == "full":
            self.params = H.init_hypernet_params(cfg, rng)
        elif variant == "win-only":
            self.params = H.init_win_params(cfg, rng)
        else:
            self.params = H.init_refine_params(cfg, rng)
            theta0 = rng.standard_normal((1, param_count(cfg.arch))) * 0.1
            self.params["const.theta0"] = T.Tensor(theta0, requires_grad=True)

    def generate_batch(self, embs) -> T.Tensor:
        if self.variant == "no-win":
            theta0 = T.tile_rows(self.params["const.theta0"], len(embs))
            return H.generate_policy_batch(self.params, self.cfg, embs, theta0=theta0)
        return H.generate_policy_batch(self.params, self.cfg, embs)
