"""Finite-difference verification harness for every differentiable path.

Used both by the `gradcheck` CLI subcommand and the acceptance suite: checks
each primitive op on random shapes and the full generator-to-loss pipeline on
a toy architecture.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .hypernet import HypernetConfig, generate_policy_batch, init_hypernet_params
from .lang import build_lexicon, encode_instruction, sample_instruction
from .policy import PolicyArch, param_count, policy_forward

PER_OP_THRESHOLD = 1e-6
PIPELINE_THRESHOLD = 1e-4


def _rand(rng, shape):
    return T.Tensor(rng.standard_normal(shape))


def check_ops(seeds=20, rng_seed: int = 0) -> dict:
    """Max finite-difference error per op over random shapes/seeds."""
    rng = np.random.default_rng(rng_seed)
    worst = {}

    def run(name, f, inputs):
        err = T.grad_check(f, inputs)
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(seeds):
        m = int(rng.integers(1, 5))
        k = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        run("matmul", lambda a, b: T.mean(T.matmul(a, b)),
            [_rand(rng, (m, k)), _rand(rng, (k, n))])
        run("transpose", lambda a: T.mean(T.mul(T.transpose(a), T.transpose(a))),
            [_rand(rng, (m, n))])
        run("add", lambda a, b: T.mean(T.mul(T.add(a, b), T.add(a, b))),
            [_rand(rng, (m, n)), _rand(rng, (m, n))])
        run("add_row_broadcast", lambda a, b: T.mean(T.mul(T.add(a, b), T.add(a, b))),
            [_rand(rng, (m, n)), _rand(rng, (1, n))])
        run("add_col_broadcast", lambda a, b: T.mean(T.mul(T.add(a, b), T.add(a, b))),
            [_rand(rng, (m, n)), _rand(rng, (m, 1))])
        run("mul", lambda a, b: T.mean(T.mul(a, b)),
            [_rand(rng, (m, n)), _rand(rng, (m, n))])
        run("smul", lambda a: T.mean(T.smul(a, 1.7)), [_rand(rng, (m, n))])
        run("relu", lambda a: T.mean(T.relu(a)), [_rand(rng, (m, n)) ])
        run("tanh", lambda a: T.mean(T.tanh(a)), [_rand(rng, (m, n))])
        run("softmax", lambda a: T.mean(T.mul(T.softmax(a), T.softmax(a))),
            [_rand(rng, (m, n + 1))])
        g = _rand(rng, (1, n + 1))
        b = _rand(rng, (1, n + 1))
        run("layer_norm", lambda x, gg, bb: T.mean(T.mul(T.layer_norm(x, gg, bb),
                                                         T.layer_norm(x, gg, bb))),
            [_rand(rng, (m, n + 1)), g, b])
        run("concat", lambda a, b: T.mean(T.mul(T.concat([a, b], axis=0),
                                                T.concat([a, b], axis=0))),
            [_rand(rng, (m, n)), _rand(rng, (k, n))])
        run("slice", lambda a: T.mean(T.slice_(a, 0, m, 0, n)),
            [_rand(rng, (m + 1, n + 2))])
        run("reshape", lambda a: T.mean(T.mul(T.reshape(a, (n, m)), T.reshape(a, (n, m)))),
            [_rand(rng, (m, n))])
        run("mean", lambda a: T.mean(a), [_rand(rng, (m, n))])
        run("mse", lambda a, b: T.mse(a, b), [_rand(rng, (m, n)), _rand(rng, (m, n))])
        idx = rng.integers(0, m, size=m + 2)
        run("gather_rows", lambda a: T.mean(T.mul(T.gather_rows(a, idx),
                                                  T.gather_rows(a, idx))),
            [_rand(rng, (m, n))])
        run("tile_rows", lambda a: T.mean(T.mul(T.tile_rows(a, 3), T.tile_rows(a, 3))),
            [_rand(rng, (m, n))])
        heads = 2
        d = 4
        blocks = int(rng.integers(1, 3))
        nq = int(rng.integers(1, 4))
        nk = int(rng.integers(1, 4))
        run("multihead_attention",
            lambda q, kv, wq, wk, wv, wo: T.mean(T.mul(
                T.multihead_attention(q, kv, wq, wk, wv, wo, heads=heads, blocks=blocks),
                T.multihead_attention(q, kv, wq, wk, wv, wo, heads=heads, blocks=blocks))),
            [_rand(rng, (blocks * nq, d)), _rand(rng, (blocks * nk, d)),
             _rand(rng, (d, d)), _rand(rng, (d, d)), _rand(rng, (d, d)),
             _rand(rng, (d, d))])
    return worst


def check_pipeline(rng_seed: int = 0, n_check: int = 250) -> float:
    """Finite-difference check of the behavior-cloning loss through the whole
    generator on a toy architecture, over a sampled subset of generator
    parameter coordinates."""
    rng = np.random.default_rng(rng_seed)
    arch = PolicyArch((3, 4, 2))
    cfg = HypernetConfig(arch=arch, d_lang=6, d=8, heads=2, win_blocks=1,
                         refine_steps=1)
    lex = build_lexicon(d_lang=6, seed=3)
    params = init_hypernet_params(cfg, rng)
    # break the zero-init identity so the refinement path carries gradient
    for name, p in params.items():
        if ".w2" in name or ".b2" in name:
            p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    instr = sample_instruction(lex, (0, 0), "train", rng)
    emb = encode_instruction(instr, lex)
    obs = rng.standard_normal((3, arch.obs_dim))
    act = rng.standard_normal((3, arch.act_dim))
    h = 1e-5

    def loss_value():
        theta = generate_policy_batch(params, cfg, [emb])
        pred = policy_forward(T.Tensor(obs), theta, arch)
        return T.mse(pred, T.Tensor(act))

    for p in params.values():
        p.grad = None
    loss = loss_value()
    T.backward(loss)
    names = sorted(params)
    coords = []
    for name in names:
        arr = params[name].data
        for _ in range(max(1, n_check // len(names))):
            coords.append((name, (int(rng.integers(arr.shape[0])),
                                  int(rng.integers(arr.shape[1])))))
    rng.shuffle(coords)
    worst = 0.0
    for name, ij in coords[:n_check]:
        p = params[name]
        analytic = 0.0 if p.grad is None else p.grad[ij]
        orig = p.data[ij]
        p.data[ij] = orig + h
        fp = loss_value().item()
        p.data[ij] = orig - h
        fm = loss_value().item()
        p.data[ij] = orig
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic - numeric) / max(1.0, abs(analytic))
        worst = max(worst, err)
    return worst


def run_all(seeds: int = 20) -> dict:
    report = {"ops": check_ops(seeds=seeds), "pipeline": check_pipeline()}
    report["ops"] = {k: float(v) for k, v in report["ops"].items()}
    report["pipeline"] = float(report["pipeline"])
    report["ops_pass"] = bool(all(v < PER_OP_THRESHOLD for v in report["ops"].values()))
    report["pipeline_pass"] = bool(report["pipeline"] < PIPELINE_THRESHOLD)
    report["pass"] = bool(report["ops_pass"] and report["pipeline_pass"])
    return report
