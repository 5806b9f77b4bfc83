"""Entangled and hypernetwork baselines, parameter-matched to the generator.

Kinds:
  - concat-mlp: MLP over [obs, pooled instruction embedding]; task and state
    share every parameter, so shortcut pathways exist by construction.
  - film-mlp: observation backbone modulated per hidden layer by
    language-conditioned scale/shift; the language influences only those
    2 * sum(hidden) numbers each step.
  - direct-hypernet: pooled embedding -> 5-layer MLP (hidden 48) -> full flat
    policy vector, no tokenization or refinement.
  - disc-no-win / disc-win-only: ablations of the two-stage generator.

Hidden widths of the entangled baselines are solved programmatically so their
trainable parameter counts land within 10% of the generator's total.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .hypernet import HypernetConfig
from .lang import Instruction, Lexicon, encode_instruction
from .models import DiscModel, GeneratorModel, Model
from .policy import PolicyArch, param_count

BASELINE_KINDS = ("concat-mlp", "film-mlp", "direct-hypernet", "disc-no-win", "disc-win-only")


def _mlp_params(dims, rng, prefix):
    p = {}
    for i in range(len(dims) - 1):
        p[f"{prefix}.l{i}.w"] = T.Tensor(
            rng.standard_normal((dims[i], dims[i + 1])) / np.sqrt(dims[i]),
            requires_grad=True)
        p[f"{prefix}.l{i}.b"] = T.Tensor(np.zeros((1, dims[i + 1])), requires_grad=True)
    return p


def _mlp_forward(p, prefix, x: T.Tensor, n_layers: int, hidden_act=T.tanh) -> T.Tensor:
    h = x
    for i in range(n_layers):
        h = T.add(T.matmul(h, p[f"{prefix}.l{i}.w"]), p[f"{prefix}.l{i}.b"])
        if i < n_layers - 1:
            h = hidden_act(h)
    return h


def _mlp_forward_np(p, prefix, x: np.ndarray, n_layers: int, act=np.tanh) -> np.ndarray:
    h = np.atleast_2d(x)
    for i in range(n_layers):
        h = h @ p[f"{prefix}.l{i}.w"].data + p[f"{prefix}.l{i}.b"].data
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_param_count(dims) -> int:
    return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def solve_width(in_dim: int, out_dim: int, n_hidden: int, target: int,
                tol: float = 0.10) -> int:
    """Smallest-error hidden width whose MLP parameter count is within
    `tol` of `target`."""
    best_w, best_err = None, None
    for w in range(1, 4096):
        n = mlp_param_count([in_dim] + [w] * n_hidden + [out_dim])
        err = abs(n - target) / target
        if best_err is None or err < best_err:
            best_w, best_err = w, err
        if n > target * (1 + tol) and best_err is not None:
            break
    if best_err is None or best_err > tol:
        raise ConfigError(
            f"no hidden width matches target {target} within {tol:.0%}")
    return best_w


def _pooled_rows(batch, lex: Lexicon) -> np.ndarray:
    """Per-transition pooled instruction embedding aligned with batch rows."""
    rows = np.empty((batch.obs.shape[0], lex.d_lang))
    for instr, idx in batch.groups:
        rows[idx] = encode_instruction(instr, lex).pooled
    return rows


class ConcatModel(Model):
    kind = "concat-mlp"

    def __init__(self, obs_dim: int, act_dim: int, lex: Lexicon,
                 rng: np.random.Generator, target_params: int, n_hidden: int = 3):
        super().__init__()
        in_dim = obs_dim + lex.d_lang
        self.width = solve_width(in_dim, act_dim, n_hidden, target_params)
        self.dims = [in_dim] + [self.width] * n_hidden + [act_dim]
        self.n_layers = len(self.dims) - 1
        self.obs_dim = obs_dim
        self.params = _mlp_params(self.dims, rng, "cc")

    def loss_on_batch(self, batch, lex: Lexicon) -> T.Tensor:
        x = T.Tensor(np.concatenate([batch.obs, _pooled_rows(batch, lex)], axis=1))
        pred = _mlp_forward(self.params, "cc", x, self.n_layers)
        return T.mse(pred, T.Tensor(batch.act))

    def act_fn(self, instr: Instruction, lex: Lexicon):
        pooled = encode_instruction(instr, lex).pooled

        def act(obs):
            x = np.concatenate([np.atleast_2d(obs), pooled[None, :]], axis=1)
            return _mlp_forward_np(self.params, "cc", x, self.n_layers)[0]
        return act


class FilmModel(Model):
    """Observation backbone with language-conditioned affine modulation.

    The modulation head is zero-initialized, so at init gamma = 1 and beta = 0
    and the backbone is unconditioned.
    """

    kind = "film-mlp"

    def __init__(self, obs_dim: int, act_dim: int, lex: Lexicon,
                 rng: np.random.Generator, target_params: int, n_hidden: int = 3):
        super().__init__()
        self.obs_dim = obs_dim
        self.n_hidden = n_hidden
        # head params grow with width too: 2 * n_hidden * w * (d_lang + 1)
        best_w, best_err = None, None
        for w in range(1, 4096):
            n = mlp_param_count([obs_dim] + [w] * n_hidden + [act_dim])
            n += 2 * n_hidden * w * (lex.d_lang + 1)
            err = abs(n - target_params) / target_params
            if best_err is None or err < best_err:
                best_w, best_err = w, err
            if n > target_params * 1.1:
                break
        if best_err is None or best_err > 0.10:
            raise ConfigError("film-mlp: no width matches the parameter target within 10%")
        self.width = best_w
        self.dims = [obs_dim] + [self.width] * n_hidden + [act_dim]
        self.n_layers = len(self.dims) - 1
        self.params = _mlp_params(self.dims, rng, "film.bb")
        n_mod = 2 * n_hidden * self.width
        self.params["film.head.w"] = T.Tensor(np.zeros((lex.d_lang, n_mod)),
                                              requires_grad=True)
        self.params["film.head.b"] = T.Tensor(np.zeros((1, n_mod)), requires_grad=True)

    def modulation_count(self) -> int:
        return 2 * self.n_hidden * self.width

    def _forward(self, obs: T.Tensor, pooled: T.Tensor) -> T.Tensor:
        mod = T.add(T.matmul(pooled, self.params["film.head.w"]), self.params["film.head.b"])
        h = obs
        w = self.width
        for i in range(self.n_layers):
            h = T.add(T.matmul(h, self.params[f"film.bb.l{i}.w"]),
                      self.params[f"film.bb.l{i}.b"])
            if i < self.n_layers - 1:
                gamma_raw = T.slice_(mod, 0, mod.shape[0], 2 * i * w, (2 * i + 1) * w)
                beta = T.slice_(mod, 0, mod.shape[0], (2 * i + 1) * w, (2 * i + 2) * w)
                h = T.add(T.add(h, T.mul(h, gamma_raw)), beta)  # gamma = 1 + raw
                h = T.tanh(h)
        return h

    def loss_on_batch(self, batch, lex: Lexicon) -> T.Tensor:
        pred = self._forward(T.Tensor(batch.obs), T.Tensor(_pooled_rows(batch, lex)))
        return T.mse(pred, T.Tensor(batch.act))

    def act_fn(self, instr: Instruction, lex: Lexicon):
        pooled = encode_instruction(instr, lex).pooled
        p, w = self.params, self.width

        def act(obs):
            mod = pooled[None, :] @ p["film.head.w"].data + p["film.head.b"].data
            h = np.atleast_2d(obs)
            for i in range(self.n_layers):
                h = h @ p[f"film.bb.l{i}.w"].data + p[f"film.bb.l{i}.b"].data
                if i < self.n_layers - 1:
                    gamma = 1.0 + mod[:, 2 * i * w:(2 * i + 1) * w]
                    beta = mod[:, (2 * i + 1) * w:(2 * i + 2) * w]
                    h = np.tanh(h * gamma + beta)
            return h[0]
        return act


class DirectHypernetModel(GeneratorModel):
    """Pooled embedding -> 5-layer ReLU MLP (hidden 48) -> flat policy vector."""

    kind = "direct-hypernet"

    def __init__(self, arch: PolicyArch, lex: Lexicon, rng: np.random.Generator,
                 hidden: int = 48, n_layers: int = 5):
        super().__init__(arch)
        self.dims = [lex.d_lang] + [hidden] * (n_layers - 1) + [param_count(arch)]
        self.n_layers = n_layers
        self.params = _mlp_params(self.dims, rng, "dh")
        # keep initial generated policies small, like the two-stage generator
        self.params[f"dh.l{n_layers - 1}.w"].data *= 0.1

    def generate_batch(self, embs) -> T.Tensor:
        pooled = T.Tensor(np.stack([e.pooled for e in embs]))
        return _mlp_forward(self.params, "dh", pooled, self.n_layers, hidden_act=T.relu)


def build_model(kind: str, hn_cfg: HypernetConfig, lex: Lexicon, obs_dim: int,
                act_dim: int, rng: np.random.Generator,
                target_params: int | None = None) -> Model:
    """Factory for every trainable method, DISC and baselines alike."""
    if kind == "disc":
        return DiscModel(hn_cfg, rng, variant="full")
    if kind == "disc-no-win":
        return DiscModel(hn_cfg, rng, variant="no-win")
    if kind == "disc-win-only":
        return DiscModel(hn_cfg, rng, variant="win-only")
    if kind == "direct-hypernet":
        return DirectHypernetModel(hn_cfg.arch, lex, rng)
    if target_params is None:
        ref = DiscModel(hn_cfg, np.random.default_rng(0), variant="full")
        target_params = ref.n_params() + param_count(hn_cfg.arch)
    if kind == "concat-mlp":
        return ConcatModel(obs_dim, act_dim, lex, rng, target_params)
    if kind == "film-mlp":
        return FilmModel(obs_dim, act_dim, lex, rng, target_params)
    raise ContractError(f"unknown model kind {kind!r}")
