"""Deterministic 2-D combinatorial pick-and-place benchmark.

One agent, n instructed objects plus inert distractors, n containers, all in
the unit square. An action is (dx, dy, g): a bounded move and a gripper
command. Grasping snaps the nearest object within reach to the agent;
releasing drops it in place. Success means the instructed object ends up
released within delta_place of the instructed container.

Observations are fixed-order scene vectors (agent pose, carry flag, object
and container positions), never reordered by task, so task identity cannot
leak through vector layout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .lang import Lexicon, all_tasks, instruction_to_id, sample_instruction


@dataclass(frozen=True)
class EnvConfig:
    n_objects: int = 3
    n_containers: int = 3
    n_distractors: int = 2
    eps_grasp: float = 0.03
    delta_place: float = 0.05
    a_max: float = 0.05
    horizon: int = 200
    layout_mode: str = "decorrelated"   # or "correlated"
    sigma_layout: float = 0.05

    def __post_init__(self):
        if not self.eps_grasp < self.delta_place < 1.0:
            raise ConfigError("need eps_grasp < delta_place < arena scale")
        if self.layout_mode not in ("decorrelated", "correlated"):
            raise ConfigError(f"unknown layout mode {self.layout_mode!r}")

    @property
    def total_objects(self) -> int:
        return self.n_objects + self.n_distractors

    @property
    def obs_dim(self) -> int:
        return 3 + 3 * self.total_objects + 3 * self.n_containers

    @property
    def act_dim(self) -> int:
        return 3


@dataclass(frozen=True)
class SceneState:
    agent: np.ndarray           # (2,)
    carrying: int               # object index or -1
    objects: np.ndarray         # (total_objects, 2)
    containers: np.ndarray      # (n_containers, 2)
    step: int


def observe(state: SceneState) -> np.ndarray:
    # object and container coordinates are agent-relative (egocentric), with
    # the distance to each entity as an explicit feature: grasp and release
    # decisions are distance thresholds, and approach directions are scaled
    # offsets, so the controller's job is a near-linear function of its input.
    # Canonical index ordering keeps the vector layout task-independent.
    rel_obj = state.objects - state.agent
    rel_cont = state.containers - state.agent
    return np.concatenate([
        state.agent,
        [1.0 if state.carrying >= 0 else 0.0],
        rel_obj.ravel(),
        rel_cont.ravel(),
        np.linalg.norm(rel_obj, axis=1),
        np.linalg.norm(rel_cont, axis=1),
    ])


def _task_anchor(cfg: EnvConfig, task) -> np.ndarray:
    # fixed grid of anchors indexed by the task pair
    k, j = task
    idx = k * cfg.n_containers + j
    n = cfg.n_objects * cfg.n_containers
    side = int(np.ceil(np.sqrt(n)))
    gx, gy = idx % side, idx // side
    lo, hi = 0.15, 0.85
    stepv = (hi - lo) / max(side - 1, 1)
    return np.array([lo + gx * stepv, lo + gy * stepv])


def env_reset(cfg: EnvConfig, task, seed) -> SceneState:
    k, j = task
    if not (0 <= k < cfg.n_objects and 0 <= j < cfg.n_containers):
        raise ContractError(f"invalid task {task}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sep = 2.0 * cfg.delta_place
    margin = cfg.delta_place
    n_entities = 1 + cfg.total_objects + cfg.n_containers  # agent + objects + containers
    fixed = []
    if cfg.layout_mode == "correlated":
        anchor = _task_anchor(cfg, task)
        pos_k = np.clip(rng.normal(anchor, cfg.sigma_layout, size=2), margin, 1 - margin)
        fixed.append(pos_k)
    for _ in range(10_000):
        pts = list(fixed)
        pts += list(rng.uniform(margin, 1 - margin, size=(n_entities - len(fixed), 2)))
        pts = np.array(pts)
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        if d.min() >= sep:
            break
    else:
        raise ConfigError("rejection sampling failed to place entities with the "
                          "required separation after 10000 tries")
    if cfg.layout_mode == "correlated":
        obj_pos = np.empty((cfg.total_objects, 2))
        others = iter(pts[1:])
        for i in range(cfg.total_objects):
            obj_pos[i] = pts[0] if i == k else next(others)
        rest = np.array(list(others))
        agent, containers = rest[0], rest[1:]
    else:
        agent = pts[0]
        obj_pos = pts[1:1 + cfg.total_objects]
        containers = pts[1 + cfg.total_objects:]
    return SceneState(agent=agent.copy(), carrying=-1, objects=obj_pos.copy(),
                      containers=containers.copy(), step=0)


def env_step(cfg: EnvConfig, state: SceneState, action) -> SceneState:
    """Apply one clipped action. Invalid grasps/releases are no-ops."""
    a = np.asarray(action, dtype=np.float64).ravel()
    if a.size != 3:
        raise ContractError(f"action must have 3 components, got {a.size}")
    dx = float(np.clip(a[0], -cfg.a_max, cfg.a_max))
    dy = float(np.clip(a[1], -cfg.a_max, cfg.a_max))
    g = float(np.clip(a[2], -1.0, 1.0))
    agent = np.clip(state.agent + (dx, dy), 0.0, 1.0)
    objects = state.objects.copy()
    carrying = state.carrying
    if carrying >= 0:
        objects[carrying] = agent
    if g > 0 and carrying < 0:
        dists = np.linalg.norm(objects - agent, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] <= cfg.eps_grasp:
            carrying = nearest
            objects[nearest] = agent
    elif g < 0 and carrying >= 0:
        carrying = -1
    return SceneState(agent=agent, carrying=carrying, objects=objects,
                      containers=state.containers, step=state.step + 1)


def success(cfg: EnvConfig, state: SceneState, task) -> bool:
    k, j = task
    if state.carrying == k:
        return False
    return float(np.linalg.norm(state.objects[k] - state.containers[j])) <= cfg.delta_place


def expert_action(cfg: EnvConfig, state: SceneState, task) -> np.ndarray:
    """Scripted two-phase expert: reach and grasp object k, carry to container j."""
    k, j = task
    if state.carrying == k:
        target = state.containers[j]
        hold, drop = 1.0, -1.0
    else:
        target = state.objects[k]
        hold, drop = -1.0, 1.0
    d = target - state.agent
    step = np.clip(d, -cfg.a_max, cfg.a_max)
    # grasp/release decisions read the CURRENT distance, so the demonstrated
    # gripper signal is a plain threshold on the observed distance feature;
    # the approach step in the same action closes the remaining gap first
    if state.carrying == k:
        g = drop if np.linalg.norm(d) <= cfg.delta_place / 2 else hold
    else:
        g = drop if np.linalg.norm(d) <= cfg.eps_grasp else hold
    return np.array([step[0], step[1], g])


def action_scale(cfg: EnvConfig) -> np.ndarray:
    """Per-channel scale between the policy's normalized action frame and the
    environment's physical one: policies command (dx/a_max, dy/a_max, g), all
    nominally in [-1, 1], so every regression channel has comparable range."""
    return np.array([cfg.a_max, cfg.a_max, 1.0])


def run_episode(cfg: EnvConfig, act_fn, task, seed, record: bool = False):
    """Roll one episode. `act_fn(obs) -> normalized action`; None runs the
    scripted expert (which reads full state, not just the observation).

    Returns (success flag, transitions, placements). Recorded transitions hold
    normalized actions (see `action_scale`). Placements are (object, container)
    pairs recorded at every release that lands an object within delta_place of
    some container; the first one feeds the leakage confusion matrix.
    """
    scale = action_scale(cfg)
    state = env_reset(cfg, task, seed)
    transitions = []
    placements = []
    ok = False
    for _ in range(cfg.horizon):
        obs = observe(state)
        if act_fn is None:
            action = expert_action(cfg, state, task)
            cmd = action / scale
        else:
            cmd = np.asarray(act_fn(obs), dtype=np.float64).ravel()
            action = cmd * scale
        nxt = env_step(cfg, state, action)
        if record:
            transitions.append((obs, np.clip(cmd, -1.0, 1.0)))
        if state.carrying >= 0 and nxt.carrying < 0:
            rel = state.carrying
            dists = np.linalg.norm(nxt.containers - nxt.objects[rel], axis=1)
            c = int(np.argmin(dists))
            if dists[c] <= cfg.delta_place:
                placements.append((rel, c))
        state = nxt
        if success(cfg, state, task):
            ok = True
            break
    return ok, transitions, placements


def first_placement(placements):
    return placements[0] if placements else None


# ---------------------------------------------------------------------------
# demonstration dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    obs: np.ndarray        # (N, obs_dim)
    act: np.ndarray        # (N, act_dim)
    task_idx: np.ndarray   # (N,) flat task index k * n_containers + j
    surface: np.ndarray    # (N,) instruction codes
    episode: np.ndarray    # (N,)
    t: np.ndarray          # (N,)
    tasks: list            # [(k, j), ...]
    config_hash: str = ""
    seed: int = 0

    def __len__(self):
        return self.obs.shape[0]


def _config_hash(cfg: EnvConfig, lex_hash: str, n_demos: int, seed: int) -> str:
    payload = json.dumps({"env": cfg.__dict__, "lex": lex_hash,
                          "n_demos": n_demos, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def generate_dataset(cfg: EnvConfig, lex: Lexicon, n_demos: int = 100,
                     seed: int = 0, tasks=None, path=None) -> Dataset:
    """Scripted-expert demonstrations, n_demos successful episodes per task.

    Every transition carries a training-split instruction code. The expert is
    expected to always succeed; more than 1% failures means the environment
    is misconfigured.
    """
    tasks = list(tasks) if tasks is not None else all_tasks(lex)
    root = np.random.SeedSequence(seed)
    rows = {key: [] for key in ("obs", "act", "task", "surface", "episode", "t")}
    failures = attempts = 0
    for ti, task in enumerate(tasks):
        done = 0
        trial = 0
        while done < n_demos:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ti, trial)))
            ok, transitions = _expert_rollout(
                cfg, task,
                np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(ti, trial, 0))))
            trial += 1
            attempts += 1
            if not ok:
                failures += 1
                if attempts >= 20 and failures / attempts > 0.01:
                    raise ConfigError(
                        f"expert failure rate {failures}/{attempts}: environment misconfigured")
                continue
            instr = sample_instruction(lex, task, "train", rng)
            code = instruction_to_id(lex, instr)
            for t, (obs, act) in enumerate(transitions):
                rows["obs"].append(obs)
                rows["act"].append(act)
                rows["task"].append(ti)
                rows["surface"].append(code)
                rows["episode"].append(done)
                rows["t"].append(t)
            done += 1
    ds = Dataset(
        obs=np.array(rows["obs"]), act=np.array(rows["act"]),
        task_idx=np.array(rows["task"], dtype=np.intp),
        surface=np.array(rows["surface"], dtype=np.int64),
        episode=np.array(rows["episode"], dtype=np.intp),
        t=np.array(rows["t"], dtype=np.intp),
        tasks=tasks, seed=seed,
        config_hash=_config_hash(cfg, lex.content_hash(), n_demos, seed))
    if path is not None:
        save_dataset(ds, path)
    return ds


def _expert_rollout(cfg: EnvConfig, task, seed):
    scale = action_scale(cfg)
    state = env_reset(cfg, task, seed)
    transitions = []
    for _ in range(cfg.horizon):
        obs = observe(state)
        action = expert_action(cfg, state, task)
        transitions.append((obs, action / scale))
        state = env_step(cfg, state, action)
        if success(cfg, state, task):
            return True, transitions
    return False, transitions


def save_dataset(ds: Dataset, path) -> None:
    """JSON Lines: a header line with provenance, then one transition per line."""
    with open(path, "w") as f:
        header = {"config_hash": ds.config_hash, "seed": ds.seed,
                  "tasks": [list(t) for t in ds.tasks]}
        f.write(json.dumps(header) + "\n")
        for i in range(len(ds)):
            k, j = ds.tasks[ds.task_idx[i]]
            rec = {"task": [int(k), int(j)], "surface": int(ds.surface[i]),
                   "obs": [round(float(x), 12) for x in ds.obs[i]],
                   "act": [round(float(x), 12) for x in ds.act[i]],
                   "episode": int(ds.episode[i]), "t": int(ds.t[i])}
            f.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as f:
        header = json.loads(f.readline())
        tasks = [tuple(t) for t in header["tasks"]]
        task_lookup = {t: i for i, t in enumerate(tasks)}
        rows = {key: [] for key in ("obs", "act", "task", "surface", "episode", "t")}
        for line in f:
            rec = json.loads(line)
            rows["obs"].append(rec["obs"])
            rows["act"].append(rec["act"])
            rows["task"].append(task_lookup[tuple(rec["task"])])
            rows["surface"].append(rec["surface"])
            rows["episode"].append(rec["episode"])
            rows["t"].append(rec["t"])
    return Dataset(obs=np.array(rows["obs"]), act=np.array(rows["act"]),
                   task_idx=np.array(rows["task"], dtype=np.intp),
                   surface=np.array(rows["surface"], dtype=np.int64),
                   episode=np.array(rows["episode"], dtype=np.intp),
                   t=np.array(rows["t"], dtype=np.intp),
                   tasks=tasks, config_hash=header["config_hash"], seed=header["seed"])
