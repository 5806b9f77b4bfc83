"""Two-stage policy-parameter generator.

Stage 1 (WIN): learnable per-row queries attend to projected instruction
tokens through a stack of transformer blocks; per-layer decoders emit every
affine row of the target policy, giving a coarse task-conditioned
initialization.

Stage 2 (refinement): a fixed number of feed-forward update steps that mimic
the structure of an optimization step over tokenized parameters: simulate a
forward pass (activation tokens), simulate a backward pass (pseudo-gradient
and Jacobian tokens), then decode additive parameter updates. Weights are
tied across steps, and the update decoders start zero-initialized so the
whole refinement stage is the identity before training.

Everything here is a pure function of (instruction embedding, parameters):
no demonstrations are seen and no loss is evaluated during generation.

All internal paths are batched over B instructions at once; token sets of
the B instructions are stacked along rows and kept independent inside the
fused block-attention op.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .lang import TaskEmbedding
from .policy import PolicyArch, param_count


@dataclass(frozen=True)
class HypernetConfig:
    arch: PolicyArch
    d_lang: int = 64
    d: int = 128
    heads: int = 4
    attn_layers_per_block: int = 1
    win_blocks: int = 4
    refine_steps: int = 3
    ff_mult: int = 2
    win_out_scale: float = 0.1

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"token dim {self.d} not divisible by {self.heads} heads")

    @property
    def tau0_tokens(self) -> int:
        # tau0 stands in for input activations, one token per observation dim
        return self.arch.obs_dim


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _add_attn(p, prefix, d, rng):
    s = 1.0 / np.sqrt(d)
    for w in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{w}"] = T.Tensor(rng.standard_normal((d, d)) * s, requires_grad=True)
    p[f"{prefix}.ln.g"] = T.Tensor(np.ones((1, d)), requires_grad=True)
    p[f"{prefix}.ln.b"] = T.Tensor(np.zeros((1, d)), requires_grad=True)


def _add_mlp(p, prefix, nin, hidden, nout, rng, zero_out=False, out_scale=1.0):
    p[f"{prefix}.w1"] = T.Tensor(rng.standard_normal((nin, hidden)) / np.sqrt(nin),
                                 requires_grad=True)
    p[f"{prefix}.b1"] = T.Tensor(np.zeros((1, hidden)), requires_grad=True)
    w2 = np.zeros((hidden, nout)) if zero_out else \
        rng.standard_normal((hidden, nout)) * (out_scale / np.sqrt(hidden))
    p[f"{prefix}.w2"] = T.Tensor(w2, requires_grad=True)
    p[f"{prefix}.b2"] = T.Tensor(np.zeros((1, nout)), requires_grad=True)


def _add_linear(p, prefix, nin, nout, rng):
    p[f"{prefix}.w"] = T.Tensor(rng.standard_normal((nin, nout)) / np.sqrt(nin),
                                requires_grad=True)
    p[f"{prefix}.b"] = T.Tensor(np.zeros((1, nout)), requires_grad=True)


def init_win_params(cfg: HypernetConfig, rng: np.random.Generator) -> dict:
    """Stage-1 parameters (phi_1)."""
    p = {}
    d = cfg.d
    total_rows = sum(r for r, _ in cfg.arch.layer_shapes())
    _add_linear(p, "win.lang", cfg.d_lang, d, rng)
    p["win.queries"] = T.Tensor(rng.standard_normal((total_rows, d)), requires_grad=True)
    for blk in range(cfg.win_blocks):
        _add_attn(p, f"win.blk{blk}.self", d, rng)
        _add_attn(p, f"win.blk{blk}.cross", d, rng)
        _add_mlp(p, f"win.blk{blk}.ffn", d, d * cfg.ff_mult, d, rng)
        p[f"win.blk{blk}.ffn.ln.g"] = T.Tensor(np.ones((1, d)), requires_grad=True)
        p[f"win.blk{blk}.ffn.ln.b"] = T.Tensor(np.zeros((1, d)), requires_grad=True)
    for i, (_, cols) in enumerate(cfg.arch.layer_shapes()):
        _add_mlp(p, f"win.dec{i}", d, d, cols, rng, out_scale=cfg.win_out_scale)
    return p


def init_refine_params(cfg: HypernetConfig, rng: np.random.Generator) -> dict:
    """Stage-2 parameters (phi_2); shared (tied) across all refinement steps."""
    p = {}
    d = cfg.d
    _add_linear(p, "ref.lang", cfg.d_lang, d, rng)
    p["ref.tau0"] = T.Tensor(rng.standard_normal((cfg.tau0_tokens, d)), requires_grad=True)
    _add_attn(p, "ref.tau0_attn", d, rng)
    _add_attn(p, "ref.fwd", d, rng)       # forward simulator
    _add_attn(p, "ref.jh", d, rng)        # layer-to-layer Jacobian tokens
    _add_attn(p, "ref.jtheta", d, rng)    # parameter Jacobian tokens
    _add_attn(p, "ref.topgrad", d, rng)   # task-conditioned top pseudo-gradient
    _add_attn(p, "ref.gradw", d, rng)     # chain rule onto parameter rows
    _add_attn(p, "ref.chain", d, rng)     # chain rule onto upstream activations
    for i, (_, cols) in enumerate(cfg.arch.layer_shapes()):
        _add_mlp(p, f"ref.enc{i}", cols, d, d, rng)
        _add_mlp(p, f"ref.dec{i}", d, d, cols, rng, zero_out=True)
    return p


def init_hypernet_params(cfg: HypernetConfig, rng: np.random.Generator) -> dict:
    p = init_win_params(cfg, rng)
    p.update(init_refine_params(cfg, rng))
    return p


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _attn_block(p, prefix, q, kv, cfg, blocks):
    a = T.multihead_attention(q, kv, p[f"{prefix}.wq"], p[f"{prefix}.wk"],
                              p[f"{prefix}.wv"], p[f"{prefix}.wo"],
                              heads=cfg.heads, blocks=blocks)
    return T.layer_norm(T.add(q, a), p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])


def _mlp(p, prefix, x):
    h = T.tanh(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _linear(p, prefix, x):
    return T.add(T.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def embed_batch(embs) -> tuple:
    """Stack instruction token sequences into one (B*Ltok, d_lang) tensor."""
    ltok = embs[0].token_sequence.shape[0]
    for e in embs:
        if e.token_sequence.shape[0] != ltok:
            raise ContractError("instruction token counts differ within a batch")
    return T.Tensor(np.concatenate([e.token_sequence for e in embs], axis=0)), len(embs)


def _row_gather_index(arch: PolicyArch, batch: int) -> list:
    """For each target layer, indices of its rows inside the stacked
    (B * total_rows) WIN token matrix."""
    shapes = arch.layer_shapes()
    total = sum(r for r, _ in shapes)
    idx = []
    off = 0
    for rows, _ in shapes:
        per_layer = np.concatenate(
            [np.arange(b * total + off, b * total + off + rows) for b in range(batch)])
        idx.append(per_layer)
        off += rows
    return idx


def _interleave_index(n1: int, n2: int, batch: int) -> np.ndarray:
    """Permutation mapping [all-of-t1 ; all-of-t2] to per-instruction groups."""
    out = []
    for b in range(batch):
        out.append(np.arange(b * n1, (b + 1) * n1))
        out.append(batch * n1 + np.arange(b * n2, (b + 1) * n2))
    return np.concatenate(out)


def _block_join(t1: T.Tensor, t2: T.Tensor, n1: int, n2: int, batch: int) -> T.Tensor:
    """Concatenate two per-instruction token sets along the token axis."""
    return T.gather_rows(T.concat([t1, t2], axis=0), _interleave_index(n1, n2, batch))


# ---------------------------------------------------------------------------
# stage 1: weight initialization network
# ---------------------------------------------------------------------------

def win_generate_batch(p: dict, cfg: HypernetConfig, lang_tokens: T.Tensor,
                       batch: int) -> T.Tensor:
    """Coarse parameters for `batch` instructions at once -> (B, P) tensor."""
    lang = _linear(p, "win.lang", lang_tokens)
    x = T.tile_rows(p["win.queries"], batch)
    for blk in range(cfg.win_blocks):
        x = _attn_block(p, f"win.blk{blk}.self", x, x, cfg, batch)
        x = _attn_block(p, f"win.blk{blk}.cross", x, lang, cfg, batch)
        y = _mlp(p, f"win.blk{blk}.ffn", x)
        x = T.layer_norm(T.add(x, y), p[f"win.blk{blk}.ffn.ln.g"], p[f"win.blk{blk}.ffn.ln.b"])
    pieces = []
    for i, (idx, (rows, cols)) in enumerate(zip(_row_gather_index(cfg.arch, batch),
                                                cfg.arch.layer_shapes())):
        decoded = _mlp(p, f"win.dec{i}", T.gather_rows(x, idx))
        pieces.append(T.reshape(decoded, (batch, rows * cols)))
    return T.concat(pieces, axis=1)


# ---------------------------------------------------------------------------
# stage 2: refinement
# ---------------------------------------------------------------------------

def tokenize_params_batch(p: dict, cfg: HypernetConfig, theta: T.Tensor,
                          batch: int) -> list:
    """Row-wise parameter tokens, one (B*out_i, d) tensor per layer."""
    offs = cfg.arch.layer_offsets()
    omegas = []
    for i, (rows, cols) in enumerate(cfg.arch.layer_shapes()):
        sl = T.reshape(T.slice_(theta, 0, batch, offs[i], offs[i + 1]),
                       (batch * rows, cols))
        omegas.append(_mlp(p, f"ref.enc{i}", sl))
    return omegas


def forward_simulate_batch(p: dict, cfg: HypernetConfig, omegas: list,
                           lang: T.Tensor, batch: int) -> list:
    """Activation tokens tau_0..tau_L; tau_0 comes from learnable queries
    attending over the instruction tokens."""
    tau0 = _attn_block(p, "ref.tau0_attn", T.tile_rows(p["ref.tau0"], batch), lang,
                       cfg, batch)
    taus = [tau0]
    for omega in omegas:
        taus.append(_attn_block(p, "ref.fwd", omega, taus[-1], cfg, batch))
    return taus


def backward_simulate_batch(p: dict, cfg: HypernetConfig, omegas: list, taus: list,
                            lang: T.Tensor, batch: int) -> list:
    """Pseudo-gradient tokens per layer (same count as parameter rows).

    The top gradient is produced by attending the last activation tokens over
    the instruction tokens; the chain onto upstream activations uses the
    previous activation tokens as queries over the concatenation of the
    current gradient and Jacobian tokens, which keeps token counts aligned
    with layer widths.
    """
    shapes = cfg.arch.layer_shapes()
    n_layers = len(omegas)
    dz = _attn_block(p, "ref.topgrad", taus[-1], lang, cfg, batch)
    grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        jtheta = _attn_block(p, "ref.jtheta", taus[i], omegas[i], cfg, batch)
        grads[i] = _attn_block(p, "ref.gradw", dz, jtheta, cfg, batch)
        if i > 0:
            jh = _attn_block(p, "ref.jh", omegas[i], taus[i], cfg, batch)
            joined = _block_join(dz, jh, shapes[i][0], shapes[i][0], batch)
            dz = _attn_block(p, "ref.chain", taus[i], joined, cfg, batch)
    return grads


def meta_update_batch(p: dict, cfg: HypernetConfig, grads: list, batch: int) -> T.Tensor:
    """Decode pseudo-gradient tokens into an additive (B, P) parameter delta."""
    pieces = []
    for i, (rows, cols) in enumerate(cfg.arch.layer_shapes()):
        decoded = _mlp(p, f"ref.dec{i}", grads[i])
        pieces.append(T.reshape(decoded, (batch, rows * cols)))
    return T.concat(pieces, axis=1)


def refine_step_batch(p: dict, cfg: HypernetConfig, theta: T.Tensor,
                      lang: T.Tensor, batch: int) -> T.Tensor:
    omegas = tokenize_params_batch(p, cfg, theta, batch)
    taus = forward_simulate_batch(p, cfg, omegas, lang, batch)
    grads = backward_simulate_batch(p, cfg, omegas, taus, lang, batch)
    return T.add(theta, meta_update_batch(p, cfg, grads, batch))


def generate_policy_batch(p: dict, cfg: HypernetConfig, embs,
                          theta0: T.Tensor | None = None) -> T.Tensor:
    """Full generation for a list of TaskEmbeddings -> (B, P) tensor.

    `theta0` overrides the WIN output (used by the no-WIN ablation)."""
    lang_tokens, batch = embed_batch(embs)
    theta = win_generate_batch(p, cfg, lang_tokens, batch) if theta0 is None else theta0
    if cfg.refine_steps > 0:
        lang = _linear(p, "ref.lang", lang_tokens)
        for _ in range(cfg.refine_steps):
            theta = refine_step_batch(p, cfg, theta, lang, batch)
    return theta


# ---------------------------------------------------------------------------
# single-instruction convenience wrappers
# ---------------------------------------------------------------------------

def win_generate(emb: TaskEmbedding, p: dict, cfg: HypernetConfig) -> np.ndarray:
    lang_tokens, batch = embed_batch([emb])
    out = win_generate_batch(p, cfg, lang_tokens, batch)
    if out.data.size != param_count(cfg.arch):
        raise ContractError("generated parameter vector does not match the target layout")
    return out.data.ravel().copy()


def generate_policy(emb: TaskEmbedding, p: dict, cfg: HypernetConfig) -> np.ndarray:
    return generate_policy_batch(p, cfg, [emb]).data.ravel().copy()


def tokenize_params(theta_flat: np.ndarray, p: dict, cfg: HypernetConfig) -> list:
    theta = T.Tensor(theta_flat.reshape(1, -1))
    return tokenize_params_batch(p, cfg, theta, 1)


def forward_simulate(omegas: list, emb: TaskEmbedding, p: dict, cfg: HypernetConfig) -> list:
    lang_tokens, batch = embed_batch([emb])
    return forward_simulate_batch(p, cfg, omegas, _linear(p, "ref.lang", lang_tokens), batch)


def backward_simulate(omegas: list, taus: list, emb: TaskEmbedding, p: dict,
                      cfg: HypernetConfig) -> list:
    lang_tokens, batch = embed_batch([emb])
    return backward_simulate_batch(p, cfg, omegas, taus,
                                   _linear(p, "ref.lang", lang_tokens), batch)


def meta_update(grads: list, p: dict, cfg: HypernetConfig) -> np.ndarray:
    return meta_update_batch(p, cfg, grads, 1).data.ravel().copy()


def refine_step(theta_flat: np.ndarray, emb: TaskEmbedding, p: dict,
                cfg: HypernetConfig) -> np.ndarray:
    lang_tokens, batch = embed_batch([emb])
    theta = T.Tensor(theta_flat.reshape(1, -1))
    out = refine_step_batch(p, cfg, theta, _linear(p, "ref.lang", lang_tokens), batch)
    return out.data.ravel().copy()
