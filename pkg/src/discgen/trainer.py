"""End-to-end behavior-cloning training for every model kind.

Batches are drawn uniformly over the global transition list. With paraphrase
augmentation on, each task represented in a batch gets a freshly drawn
training-split instruction, so the model keeps seeing new surface forms of
the same task. Generated policies are produced once per distinct instruction
per step (generation is deterministic, so this caching is exact).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .lang import Lexicon, id_to_instruction, sample_instruction
from .models import Model
from .optim import AdamW, cosine_lr


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    groups: list  # [(Instruction, row index array)], row indices into obs/act


def sample_batch(ds, lex: Lexicon, batch_size: int, rng: np.random.Generator,
                 paraphrase: bool = True, tasks_per_batch: int | None = None) -> Batch:
    """Uniform transition sampling, optionally restricted to a task subset.

    When `tasks_per_batch` is set, a subset of tasks is drawn with probability
    proportional to their transition counts and the batch is sampled uniformly
    within it; marginally over steps every transition is still sampled
    uniformly, while the number of distinct generations per step stays
    bounded.
    """
    if len(ds) == 0:
        raise ContractError("cannot sample from an empty dataset")
    n_tasks = len(ds.tasks)
    if tasks_per_batch is not None and tasks_per_batch < n_tasks:
        counts = np.bincount(ds.task_idx, minlength=n_tasks).astype(float)
        chosen = rng.choice(n_tasks, size=tasks_per_batch, replace=False,
                            p=counts / counts.sum())
        pool = np.flatnonzero(np.isin(ds.task_idx, chosen))
    else:
        pool = None
    if pool is None:
        idx = rng.integers(0, len(ds), size=batch_size)
    else:
        idx = pool[rng.integers(0, pool.size, size=batch_size)]
    groups = []
    for ti in np.unique(ds.task_idx[idx]):
        rows = np.flatnonzero(ds.task_idx[idx] == ti)
        task = ds.tasks[ti]
        if paraphrase:
            instr = sample_instruction(lex, task, "train", rng)
            groups.append((instr, rows))
        else:
            codes = ds.surface[idx][rows]
            for code in np.unique(codes):
                instr = id_to_instruction(lex, task, int(code))
                groups.append((instr, rows[codes == code]))
    return Batch(obs=ds.obs[idx], act=ds.act[idx], groups=groups)


def bc_loss(batch: Batch, model: Model, lex: Lexicon) -> T.Tensor:
    """Mean squared error between predicted and demonstrated actions."""
    loss = model.loss_on_batch(batch, lex)
    if not np.isfinite(loss.data[0, 0]):
        raise ContractError(
            f"non-finite behavior-cloning loss ({loss.data[0, 0]}); "
            f"batch of {batch.obs.shape[0]} with {len(batch.groups)} instruction groups")
    return loss


@dataclass
class TrainResult:
    steps: int
    losses: np.ndarray
    lrs: np.ndarray
    wall_time: float
    grad_reached: dict = field(default_factory=dict)


def train(model: Model, ds, lex: Lexicon, steps: int = 20_000, lr: float = 1e-4,
          batch_size: int = 128, seed: int = 0, weight_decay: float = 1e-4,
          paraphrase: bool = True, tasks_per_batch: int | None = None,
          out_dir=None, checkpoint_every: int = 1000,
          log_every: int = 100, grad_clip: float | None = None) -> TrainResult:
    """Deterministic AdamW + cosine-schedule training loop.

    Aborts if the loss stays above 10x its initial value for 500 consecutive
    steps. Emits a loss-curve CSV and periodic checkpoints when `out_dir` is
    given.
    """
    if steps <= 0:
        raise ConfigError("steps must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(777,)))
    opt = AdamW(model.params, lr=lr, weight_decay=weight_decay)
    losses = np.empty(steps)
    lrs = np.empty(steps)
    initial_loss = None
    bad_streak = 0
    grad_reached: dict = {}
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for step in range(steps):
        batch = sample_batch(ds, lex, batch_size, rng, paraphrase=paraphrase,
                             tasks_per_batch=tasks_per_batch)
        opt.zero_grad()
        loss = bc_loss(batch, model, lex)
        T.backward(loss)
        if grad_clip is not None:
            total = np.sqrt(sum(float(np.sum(p.grad * p.grad))
                                for p in model.params.values() if p.grad is not None))
            if total > grad_clip:
                scale = grad_clip / total
                for p in model.params.values():
                    if p.grad is not None:
                        p.grad *= scale
        if step < 10:
            for name, p in model.params.items():
                if p.grad is not None and np.any(p.grad != 0):
                    grad_reached.setdefault(name, step)
        step_lr = cosine_lr(step, steps, lr)
        opt.step(lr=step_lr)
        model.clear_cache()
        losses[step] = loss.data[0, 0]
        lrs[step] = step_lr
        if initial_loss is None:
            initial_loss = losses[step]
        if losses[step] > 10.0 * initial_loss:
            bad_streak += 1
            if bad_streak >= 500:
                raise ContractError(
                    f"training diverged: loss {losses[step]:.4g} above 10x initial "
                    f"({initial_loss:.4g}) for 500 consecutive steps")
        else:
            bad_streak = 0
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            model.save(out_dir / f"checkpoint_{step + 1:06d}.bin")
    wall = time.perf_counter() - t0
    if out_dir is not None:
        model.save(out_dir / "final.bin")
        write_loss_curve(out_dir / "loss_curve.csv", losses, lrs, seed=seed)
    return TrainResult(steps=steps, losses=losses, lrs=lrs, wall_time=wall,
                       grad_reached=grad_reached)


def write_loss_curve(path, losses, lrs, seed=0, config_hash="") -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash} seed={seed}\n")
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for i, (lr_i, l_i) in enumerate(zip(lrs, losses)):
            w.writerow([i, f"{lr_i:.10g}", f"{l_i:.10g}"])
