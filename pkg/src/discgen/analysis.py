"""Parameter-manifold structure and timing analyses."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .lang import Lexicon, all_tasks, sample_instruction
from .models import GeneratorModel, Model


@dataclass
class ManifoldResult:
    tasks: list
    thetas: np.ndarray       # (n_tasks, P)
    cosine: np.ndarray       # (n_tasks, n_tasks)
    coords: np.ndarray       # (n_tasks, 2) principal-component projection

    def pair_stats(self):
        """Mean cosine for same-object, same-container, and unrelated task pairs."""
        sums = {"same_object": [], "same_container": [], "unrelated": []}
        for i, (ki, ji) in enumerate(self.tasks):
            for j_, (kj, jj) in enumerate(self.tasks):
                if j_ <= i:
                    continue
                if ki == kj:
                    sums["same_object"].append(self.cosine[i, j_])
                elif ji == jj:
                    sums["same_container"].append(self.cosine[i, j_])
                else:
                    sums["unrelated"].append(self.cosine[i, j_])
        return {k: float(np.mean(v)) if v else float("nan") for k, v in sums.items()}


def manifold_export(model: GeneratorModel, lex: Lexicon, tasks=None,
                    seed: int = 0) -> ManifoldResult:
    """Pairwise cosine similarity of generated policy vectors plus a 2-D
    principal-component projection (deterministic stand-in for a stochastic
    embedding)."""
    tasks = list(tasks) if tasks is not None else all_tasks(lex)
    thetas = []
    for ti, task in enumerate(tasks):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ti,)))
        instr = sample_instruction(lex, task, "train", rng)
        thetas.append(model.generate_flat(instr, lex))
    thetas = np.array(thetas)
    norms = np.linalg.norm(thetas, axis=1, keepdims=True)
    unit = thetas / np.where(norms > 0, norms, 1.0)
    cosine = unit @ unit.T
    centered = thetas - thetas.mean(axis=0)
    # SVD signs fixed for determinism
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    v = vt[:2].T
    signs = np.sign(v[np.argmax(np.abs(v), axis=0), [0, 1]])
    coords = centered @ (v * signs)
    return ManifoldResult(tasks=tasks, thetas=thetas, cosine=cosine, coords=coords)


def write_manifold_csv(result: ManifoldResult, cos_path, coords_path,
                       config_hash: str = "", seed: int = 0) -> None:
    labels = [f"{k}_{j}" for k, j in result.tasks]
    with open(cos_path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash} seed={seed}\n")
        w = csv.writer(f)
        w.writerow(["task"] + labels)
        for lab, row in zip(labels, result.cosine):
            w.writerow([lab] + [f"{x:.10g}" for x in row])
    with open(coords_path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash} seed={seed}\n")
        w = csv.writer(f)
        w.writerow(["task", "pc1", "pc2"])
        for lab, (x, y) in zip(labels, result.coords):
            w.writerow([lab, f"{x:.10g}", f"{y:.10g}"])


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def _time_calls(fn, n_trials: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    # batch calls if a single call is near timer resolution
    t0 = time.perf_counter()
    fn()
    single = time.perf_counter() - t0
    reps = max(1, int(1e-4 / single)) if single < 1e-4 else 1
    samples = np.empty(n_trials)
    for i in range(n_trials):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        samples[i] = (time.perf_counter() - t0) / reps
    return samples * 1e3  # ms


def timing_bench(model: GeneratorModel, lex: Lexicon, n_trials: int = 1000,
                 warmup: int = 100, seed: int = 0,
                 baseline: Model | None = None) -> dict:
    """Median/p95 wall-clock of one weight generation vs one target-policy step."""
    if not isinstance(model, GeneratorModel):
        raise ContractError("timing_bench expects a generator model")
    rng = np.random.default_rng(seed)
    task = (0, 0)
    instr = sample_instruction(lex, task, "train", rng)
    obs = rng.uniform(0, 1, size=model.arch.obs_dim)

    def gen():
        model.clear_cache()
        model.generate_flat(instr, lex)

    flat = model.generate_flat(instr, lex)
    from .policy import policy_forward_np

    def step():
        policy_forward_np(obs, flat, model.arch)

    gen_ms = _time_calls(gen, n_trials, warmup)
    step_ms = _time_calls(step, n_trials, warmup)
    out = {
        "weight_gen_ms": float(np.median(gen_ms)),
        "weight_gen_ms_p95": float(np.percentile(gen_ms, 95)),
        "target_step_ms": float(np.median(step_ms)),
        "target_step_ms_p95": float(np.percentile(step_ms, 95)),
    }
    if baseline is not None:
        act = baseline.act_fn(instr, lex)
        bl_ms = _time_calls(lambda: act(obs), n_trials, warmup)
        out["baseline_step_ms"] = float(np.median(bl_ms))
        out["baseline_step_ms_p95"] = float(np.percentile(bl_ms, 95))
    out["gen_over_step_ratio"] = out["weight_gen_ms"] / max(out["target_step_ms"], 1e-12)
    return out


class CountingGenerator:
    """Wraps a generator model to count distinct generation calls (used to
    verify the generate-once-act-many pattern)."""

    def __init__(self, model: GeneratorModel):
        self.model = model
        self.calls = 0

    def __getattr__(self, name):
        return getattr(self.model, name)

    def generate_flat(self, instr, lex):
        key = (instr.task, instr.surface_ids)
        if key not in self.model._cache:
            self.calls += 1
        return self.model.generate_flat(instr, lex)

    def act_fn(self, instr, lex):
        flat = self.generate_flat(instr, lex)
        from .policy import policy_forward_np
        arch = self.model.arch
        return lambda obs: policy_forward_np(obs, flat, arch)[0]
