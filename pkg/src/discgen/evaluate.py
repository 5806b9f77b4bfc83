"""Rollout evaluation, leakage confusion analysis, paraphrase grounding, and
few-shot adaptation with a parameter-matched low-rank baseline."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .env import EnvConfig, Dataset, first_placement, generate_dataset, run_episode
from .errors import ConfigError, ContractError
from .lang import Lexicon, all_tasks, sample_instruction
from .models import GeneratorModel, Model
from .baselines import ConcatModel
from .optim import AdamState, adamw_step
from .policy import PolicyArch, param_count, init_params, policy_forward, policy_forward_np


@dataclass
class EvalReport:
    tasks: list
    task_success: np.ndarray       # (n_tasks,)
    confusion: np.ndarray          # (n_tasks, n_tasks + 1); last column = no placement
    n_episodes: int
    split: str
    seed: int

    @property
    def overall(self) -> float:
        return float(self.task_success.mean())

    def leakage_score(self) -> float:
        """Mean off-diagonal first-placement mass (no-op column excluded)."""
        n = len(self.tasks)
        c = self.confusion[:, :n]
        return float((c.sum() - np.trace(c)) / n)

    def to_csv(self, path, config_hash: str = "") -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# config_hash={config_hash} seed={self.seed} split={self.split}\n")
            w = csv.writer(f)
            cols = [f"placed_{k}_{j}" for k, j in self.tasks] + ["no_placement"]
            w.writerow(["object", "container", "success"] + cols)
            for i, (k, j) in enumerate(self.tasks):
                w.writerow([k, j, f"{self.task_success[i]:.6g}"] +
                           [f"{x:.6g}" for x in self.confusion[i]])

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({
                "overall": self.overall,
                "per_task": {f"{k}_{j}": float(s)
                             for (k, j), s in zip(self.tasks, self.task_success)},
                "leakage_score": self.leakage_score(),
                "n_episodes": self.n_episodes,
                "split": self.split,
                "seed": self.seed,
            }, f, indent=2)


def rollout_eval(model: Model, cfg: EnvConfig, lex: Lexicon, n_episodes: int = 30,
                 split: str = "train", seed: int = 0, tasks=None) -> EvalReport:
    """Per-task success over fresh episodes.

    Environment seeds depend only on (seed, task, episode), never on the
    paraphrase split, so train/heldout comparisons are paired. Generator
    models build each policy once per (task, surface) and reuse it.
    """
    tasks = list(tasks) if tasks is not None else all_tasks(lex)
    n = len(tasks)
    succ = np.zeros(n)
    conf = np.zeros((n, n + 1))
    place_index = {t: i for i, t in enumerate(tasks)}
    for ti, task in enumerate(tasks):
        for e in range(n_episodes):
            instr_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(ti, e, 1)))
            instr = sample_instruction(lex, task, split, instr_rng)
            env_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(ti, e, 2)))
            act = model.act_fn(instr, lex)
            ok, _, placements = run_episode(cfg, act, task, env_rng)
            succ[ti] += ok
            fp = first_placement(placements)
            if fp is None:
                conf[ti, n] += 1.0
            elif fp in place_index:
                conf[ti, place_index[fp]] += 1.0
            # releases next to a container that is not a task pair (e.g. a
            # distractor object) are counted as no-ops for the confusion matrix
            else:
                conf[ti, n] += 1.0
    succ /= n_episodes
    conf /= n_episodes
    return EvalReport(tasks=tasks, task_success=succ, confusion=conf,
                      n_episodes=n_episodes, split=split, seed=seed)


def leakage_eval(model: Model, lex: Lexicon, seed: int = 0,
                 n_episodes: int = 30, base_cfg: EnvConfig | None = None) -> EvalReport:
    """Evaluate a correlated-layout-trained model on decorrelated resets; the
    off-diagonal confusion mass is the leakage score."""
    cfg = base_cfg or EnvConfig()
    if cfg.layout_mode != "decorrelated":
        cfg = EnvConfig(**{**cfg.__dict__, "layout_mode": "decorrelated"})
    return rollout_eval(model, cfg, lex, n_episodes=n_episodes, seed=seed)


def paraphrase_eval(model: Model, cfg: EnvConfig, lex: Lexicon, seed: int = 0,
                    n_episodes: int = 30):
    """Paired success on training vs held-out surface forms; returns
    (train report, heldout report, success gap)."""
    r_train = rollout_eval(model, cfg, lex, n_episodes=n_episodes, split="train", seed=seed)
    r_held = rollout_eval(model, cfg, lex, n_episodes=n_episodes, split="heldout", seed=seed)
    return r_train, r_held, r_train.overall - r_held.overall


# ---------------------------------------------------------------------------
# few-shot adaptation
# ---------------------------------------------------------------------------

@dataclass
class AdaptResult:
    checkpoints: list
    val_losses: list
    successes: list
    theta: np.ndarray
    phi_hash_before: str = ""
    phi_hash_after: str = ""


def _demo_dataset(cfg: EnvConfig, lex: Lexicon, task, n_demos: int, seed: int) -> Dataset:
    return generate_dataset(cfg, lex, n_demos=n_demos, seed=seed, tasks=[task])


def few_shot_adapt(model: GeneratorModel, lex: Lexicon, cfg: EnvConfig, task,
                   k_demos: int, steps: int = 1000, eta: float = 1e-3,
                   checkpoints=(0, 50, 200, 500, 1000), seed: int = 0,
                   init: str = "hypernet", n_eval_episodes: int = 20,
                   n_val_demos: int = 10, eval_success: bool = True) -> AdaptResult:
    """Adam fine-tuning of the generated policy only; the generator stays frozen.

    `init="random"` replaces the generated initialization with a fresh
    fan-in-scaled random policy, the control for initialization quality.
    """
    if k_demos <= 0:
        raise ContractError("few-shot adaptation needs at least one demonstration")
    arch = model.arch
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(555,)))
    demos = _demo_dataset(cfg, lex, task, k_demos, seed)
    val = _demo_dataset(cfg, lex, task, n_val_demos, seed + 10_000)
    instr = sample_instruction(lex, task, "train", rng)
    phi_before = model.params_hash()
    if init == "hypernet":
        theta = model.generate_flat(instr, lex).copy()
    elif init == "random":
        theta = init_params(arch, rng)
    else:
        raise ContractError(f"unknown init {init!r}")
    theta2d = theta.reshape(1, -1)   # shared memory with theta
    state = AdamState.for_param(theta2d)
    batch_size = min(128, len(demos))
    results = AdaptResult(checkpoints=[], val_losses=[], successes=[], theta=theta)

    def record(step):
        vl = float(np.mean((policy_forward_np(val.obs, theta, arch) - val.act) ** 2))
        results.checkpoints.append(step)
        results.val_losses.append(vl)
        if eval_success:
            ok = 0
            for e in range(n_eval_episodes):
                env_rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=seed, spawn_key=(9, step, e)))
                done, _, _ = run_episode(
                    cfg, lambda obs: policy_forward_np(obs, theta, arch)[0],
                    task, env_rng)
                ok += done
            results.successes.append(ok / n_eval_episodes)
        else:
            results.successes.append(float("nan"))

    check = set(checkpoints)
    if 0 in check:
        record(0)
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(demos), size=batch_size)
        th = T.Tensor(theta2d, requires_grad=True)
        pred = policy_forward(T.Tensor(demos.obs[idx]), th, arch)
        loss = T.mse(pred, T.Tensor(demos.act[idx]))
        T.backward(loss)
        adamw_step(theta2d, th.grad, state, eta, weight_decay=0.0)
        if step in check:
            record(step)
    results.theta = theta
    results.phi_hash_before = phi_before
    results.phi_hash_after = model.params_hash()
    return results


# ---------------------------------------------------------------------------
# low-rank adapter baseline
# ---------------------------------------------------------------------------

def solve_rank(dims, target: int, tol: float = 0.10) -> int:
    """Rank whose added parameter count best matches `target` (within tol)."""
    per_rank = sum(dims[i] + dims[i + 1] for i in range(len(dims) - 1))
    r = max(1, round(target / per_rank))
    best = min((abs(rr * per_rank - target), rr) for rr in (max(1, r - 1), r, r + 1))
    if best[0] / target > tol:
        raise ConfigError(
            f"no adapter rank matches target {target} within {tol:.0%}")
    return best[1]


@dataclass
class LowRankAdapter:
    model: ConcatModel
    rank: int
    factors: list  # [(A Tensor, B Tensor)] per backbone layer

    def added_params(self) -> int:
        return sum(a.data.size + b.data.size for a, b in self.factors)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(x)
        p = self.model.params
        for i in range(self.model.n_layers):
            w = p[f"cc.l{i}.w"].data
            a, b = self.factors[i]
            h = h @ w + (h @ a.data) @ b.data + p[f"cc.l{i}.b"].data
            if i < self.model.n_layers - 1:
                h = np.tanh(h)
        return h

    def act_fn(self, instr, lex: Lexicon):
        from .lang import encode_instruction
        pooled = encode_instruction(instr, lex).pooled

        def act(obs):
            x = np.concatenate([np.atleast_2d(obs), pooled[None, :]], axis=1)
            return self.forward_np(x)[0]
        return act


def lowrank_adapt(model: ConcatModel, lex: Lexicon, cfg: EnvConfig, task,
                  k_demos: int, target_params: int, rank: int | None = None,
                  steps: int = 1000, eta: float = 1e-3, seed: int = 0) -> LowRankAdapter:
    """Frozen concat backbone plus trainable low-rank additive factors.

    Rank is solved so the trainable parameter count matches the generated
    policy's size; rank 0 is the degenerate identity adapter.
    """
    if not isinstance(model, ConcatModel):
        raise ContractError("low-rank adaptation is defined for the concat baseline")
    dims = model.dims
    if rank is None:
        rank = solve_rank(dims, target_params)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(556,)))
    factors = []
    for i in range(model.n_layers):
        nin, nout = dims[i], dims[i + 1]
        a = T.Tensor(rng.standard_normal((nin, max(rank, 1))) / np.sqrt(nin),
                     requires_grad=rank > 0)
        b = T.Tensor(np.zeros((max(rank, 1), nout)), requires_grad=rank > 0)
        factors.append((a, b))
    adapter = LowRankAdapter(model=model, rank=rank, factors=factors)
    if rank == 0 or k_demos == 0:
        return adapter
    demos = _demo_dataset(cfg, lex, task, k_demos, seed)
    instr_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(557,)))
    instr = sample_instruction(lex, task, "train", instr_rng)
    from .lang import encode_instruction
    pooled = encode_instruction(instr, lex).pooled
    x_full = np.concatenate([demos.obs, np.tile(pooled, (len(demos), 1))], axis=1)
    states = [(AdamState.for_param(a.data), AdamState.for_param(b.data))
              for a, b in factors]
    batch_size = min(128, len(demos))
    p = model.params
    for _ in range(steps):
        idx = rng.integers(0, len(demos), size=batch_size)
        h = T.Tensor(x_full[idx])
        for i in range(model.n_layers):
            a, b = factors[i]
            a.grad = b.grad = None
            w = p[f"cc.l{i}.w"]
            base = T.matmul(h, w)
            low = T.matmul(T.matmul(h, a), b)
            h = T.add(T.add(base, low), p[f"cc.l{i}.b"])
            if i < model.n_layers - 1:
                h = T.tanh(h)
        loss = T.mse(h, T.Tensor(demos.act[idx]))
        T.backward(loss)
        for (a, b), (sa, sb) in zip(factors, states):
            if a.grad is not None:
                adamw_step(a.data, a.grad, sa, eta, weight_decay=0.0)
            if b.grad is not None:
                adamw_step(b.data, b.grad, sb, eta, weight_decay=0.0)
    return adapter
