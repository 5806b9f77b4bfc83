"""Synthetic instruction language with a frozen encoder.

Concepts (verb, objects, containers, fillers) each own a pool of surface
forms. A surface vector is its concept's base vector plus small Gaussian
noise, renormalized, so paraphrases of one concept land near each other in
embedding space. The encoder is a pure lookup: nothing here is ever trained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

MAX_TOKENS = 32
TRAIN_SURFACES = 50
HELDOUT_SURFACES = 10


@dataclass(frozen=True)
class Lexicon:
    concepts: tuple          # ((concept_id, role), ...)
    surfaces_per_concept: int
    sigma_syn: float
    d_lang: int
    seed: int
    n_objects: int
    n_containers: int
    n_fillers: int
    vectors: np.ndarray = field(repr=False, compare=False)  # (C*S, d_lang), unit rows
    base: np.ndarray = field(repr=False, compare=False)     # (C, d_lang)

    def concept_index(self, concept_id: str) -> int:
        for i, (cid, _) in enumerate(self.concepts):
            if cid == concept_id:
                return i
        raise ContractError(f"unknown concept {concept_id!r}")

    def surface_vector(self, global_surface_id: int) -> np.ndarray:
        if not 0 <= global_surface_id < self.vectors.shape[0]:
            raise ContractError(f"unknown surface id {global_surface_id}")
        return self.vectors[global_surface_id]

    def global_surface(self, concept_idx: int, local_surface: int) -> int:
        if not 0 <= local_surface < self.surfaces_per_concept:
            raise ContractError(f"surface index {local_surface} out of range")
        return concept_idx * self.surfaces_per_concept + local_surface

    # concept layout: [verb, obj0..obj_{n-1}, cont0..cont_{m-1}, fill0..]
    def object_concept(self, k: int) -> int:
        if not 0 <= k < self.n_objects:
            raise ContractError(f"object index {k} out of range")
        return 1 + k

    def container_concept(self, j: int) -> int:
        if not 0 <= j < self.n_containers:
            raise ContractError(f"container index {j} out of range")
        return 1 + self.n_objects + j

    def filler_concept(self, f: int) -> int:
        if not 0 <= f < self.n_fillers:
            raise ContractError(f"filler index {f} out of range")
        return 1 + self.n_objects + self.n_containers + f

    def content_hash(self) -> str:
        return hashlib.sha256(self.vectors.tobytes()).hexdigest()


@dataclass(frozen=True)
class Instruction:
    task: tuple              # (object index k, container index j)
    surface_ids: tuple       # global surface ids: (verb, object, container, filler)
    split: str               # "train" | "heldout"


@dataclass(frozen=True)
class TaskEmbedding:
    token_sequence: np.ndarray  # (L, d_lang)
    pooled: np.ndarray          # (d_lang,)


def build_lexicon(n_objects: int = 3, n_containers: int = 3, surfaces: int = 60,
                  sigma_syn: float = 0.1, d_lang: int = 64, seed: int = 0,
                  n_fillers: int = 2) -> Lexicon:
    if surfaces < TRAIN_SURFACES + HELDOUT_SURFACES:
        raise ConfigError(
            f"need >= {TRAIN_SURFACES + HELDOUT_SURFACES} surfaces per concept "
            f"to realize the {TRAIN_SURFACES}/{HELDOUT_SURFACES} paraphrase split, got {surfaces}")
    concepts = [("verb0", "verb")]
    concepts += [(f"obj{k}", "object") for k in range(n_objects)]
    concepts += [(f"cont{j}", "container") for j in range(n_containers)]
    concepts += [(f"fill{f}", "filler") for f in range(n_fillers)]
    rng = np.random.default_rng(seed)
    c = len(concepts)
    base = rng.standard_normal((c, d_lang)) / np.sqrt(d_lang)
    noise = rng.standard_normal((c, surfaces, d_lang))
    vecs = base[:, None, :] + sigma_syn * noise
    vecs /= np.linalg.norm(vecs, axis=2, keepdims=True)
    return Lexicon(concepts=tuple(concepts), surfaces_per_concept=surfaces,
                   sigma_syn=sigma_syn, d_lang=d_lang, seed=seed,
                   n_objects=n_objects, n_containers=n_containers, n_fillers=n_fillers,
                   vectors=vecs.reshape(c * surfaces, d_lang), base=base)


def paraphrase_split(lex: Lexicon):
    """Per concept: first 50 surfaces train, last 10 held out. Disjoint by
    construction and deterministic because the lexicon itself is."""
    train, heldout = {}, {}
    for ci in range(len(lex.concepts)):
        train[ci] = list(range(TRAIN_SURFACES))
        heldout[ci] = list(range(TRAIN_SURFACES, TRAIN_SURFACES + HELDOUT_SURFACES))
    return train, heldout


def _split_surfaces(lex: Lexicon, split: str):
    train, heldout = paraphrase_split(lex)
    if split == "train":
        return train
    if split == "heldout":
        return heldout
    raise ContractError(f"unknown paraphrase split {split!r}")


def sample_instruction(lex: Lexicon, task, split: str, rng: np.random.Generator) -> Instruction:
    """Draw one surface realization of a task from the given paraphrase split."""
    k, j = task
    pool = _split_surfaces(lex, split)
    cv, ck, cj = lex.concept_index("verb0"), lex.object_concept(k), lex.container_concept(j)
    cf = lex.filler_concept(int(rng.integers(lex.n_fillers)))
    ids = tuple(lex.global_surface(ci, int(rng.choice(pool[ci]))) for ci in (cv, ck, cj, cf))
    return Instruction(task=(k, j), surface_ids=ids, split=split)


def encode_instruction(instr: Instruction, lex: Lexicon) -> TaskEmbedding:
    """Frozen encoder: pure lookup of surface vectors, mean-pooled summary."""
    if len(instr.surface_ids) > MAX_TOKENS:
        raise ContractError(
            f"instruction has {len(instr.surface_ids)} tokens, max is {MAX_TOKENS}")
    rows = np.stack([lex.surface_vector(s) for s in instr.surface_ids])
    return TaskEmbedding(token_sequence=rows, pooled=rows.mean(axis=0))


# instruction identity <-> compact integer (used in dataset files; the task
# pair is stored separately, so only within-concept choices are encoded)

def instruction_to_id(lex: Lexicon, instr: Instruction) -> int:
    s = lex.surfaces_per_concept
    vs = instr.surface_ids[0] % s
    os_ = instr.surface_ids[1] % s
    cs = instr.surface_ids[2] % s
    fc = instr.surface_ids[3] // s - lex.filler_concept(0)
    fs = instr.surface_ids[3] % s
    return (((vs * s + os_) * s + cs) * lex.n_fillers + fc) * s + fs


def id_to_instruction(lex: Lexicon, task, code: int, split: str = "train") -> Instruction:
    s = lex.surfaces_per_concept
    code, fs = divmod(code, s)
    code, fc = divmod(code, lex.n_fillers)
    code, cs = divmod(code, s)
    vs, os_ = divmod(code, s)
    k, j = task
    ids = (lex.global_surface(lex.concept_index("verb0"), vs),
           lex.global_surface(lex.object_concept(k), os_),
           lex.global_surface(lex.container_concept(j), cs),
           lex.global_surface(lex.filler_concept(fc), fs))
    return Instruction(task=(k, j), surface_ids=ids, split=split)


def save_lexicon(lex: Lexicon, path) -> None:
    """Embeddings are regenerated from the seed, never stored."""
    spec = {
        "n_objects": lex.n_objects, "n_containers": lex.n_containers,
        "surfaces": lex.surfaces_per_concept, "sigma_syn": lex.sigma_syn,
        "d_lang": lex.d_lang, "seed": lex.seed, "n_fillers": lex.n_fillers,
        "concepts": [list(c) for c in lex.concepts],
    }
    with open(path, "w") as f:
        json.dump(spec, f, indent=2)


def load_lexicon(path) -> Lexicon:
    with open(path) as f:
        spec = json.load(f)
    lex = build_lexicon(n_objects=spec["n_objects"], n_containers=spec["n_containers"],
                        surfaces=spec["surfaces"], sigma_syn=spec["sigma_syn"],
                        d_lang=spec["d_lang"], seed=spec["seed"], n_fillers=spec["n_fillers"])
    if [list(c) for c in lex.concepts] != spec["concepts"]:
        raise ConfigError("lexicon file concepts do not match regenerated lexicon")
    return lex


def all_tasks(lex: Lexicon):
    return [(k, j) for k in range(lex.n_objects) for j in range(lex.n_containers)]
