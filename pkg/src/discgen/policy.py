"""Compact generated MLP controller and its canonical flat parameter layout.

Layout: layers are stored in order; layer i occupies out_i * (in_i + 1)
consecutive entries, one affine row [W row | bias] at a time. Every generator
and baseline shares this layout, and the hypernet tokenizes exactly these
rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from . import tensor as T

MAGIC = b"DISCWT\x00\x00"
WEIGHTS_VERSION = 1
SECTIONS_VERSION = 2


@dataclass(frozen=True)
class PolicyArch:
    layer_dims: tuple  # (obs_dim, h1, ..., act_dim)

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ContractError(f"invalid layer dims {self.layer_dims}")

    @property
    def obs_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def act_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def layer_shapes(self):
        """Per layer: (rows=out, cols=in+1), bias folded into each row."""
        d = self.layer_dims
        return [(d[i + 1], d[i] + 1) for i in range(self.n_layers)]

    def layer_offsets(self):
        offs = [0]
        for r, c in self.layer_shapes():
            offs.append(offs[-1] + r * c)
        return offs


def param_count(arch: PolicyArch) -> int:
    return sum(r * c for r, c in arch.layer_shapes())


def init_params(arch: PolicyArch, rng: np.random.Generator, scale: float | None = None) -> np.ndarray:
    """Fan-in scaled uniform init, biases zero; used for baselines and the
    random-init adaptation control."""
    flat = np.zeros(param_count(arch))
    offs = arch.layer_offsets()
    for i, (r, c) in enumerate(arch.layer_shapes()):
        fan_in = c - 1
        bound = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(r, c))
        w[:, -1] = 0.0
        flat[offs[i]:offs[i + 1]] = w.ravel()
    return flat


def unflatten(flat: np.ndarray, arch: PolicyArch):
    if flat.size != param_count(arch):
        raise ContractError(f"param vector length {flat.size} != {param_count(arch)}")
    offs = arch.layer_offsets()
    return [flat[offs[i]:offs[i + 1]].reshape(shape)
            for i, shape in enumerate(arch.layer_shapes())]


def flatten(mats, arch: PolicyArch) -> np.ndarray:
    return np.concatenate([m.ravel() for m in mats])


def policy_forward_np(obs: np.ndarray, flat: np.ndarray, arch: PolicyArch) -> np.ndarray:
    """Fast no-grad forward: (n, obs_dim) -> (n, act_dim). tanh hidden, linear out."""
    obs = np.atleast_2d(obs)
    if obs.shape[1] != arch.obs_dim:
        raise ContractError(f"obs dim {obs.shape[1]} != {arch.obs_dim}")
    h = obs
    mats = unflatten(flat, arch)
    for i, m in enumerate(mats):
        h = h @ m[:, :-1].T + m[:, -1]
        if i < len(mats) - 1:
            h = np.tanh(h)
    return h


def policy_forward(obs: T.Tensor, theta: T.Tensor, arch: PolicyArch) -> T.Tensor:
    """Differentiable forward through a (1, P) parameter tensor.

    Gradients flow to both the observations and theta, which is what lets a
    behavior-cloning loss reach back through the generator.
    """
    if theta.data.size != param_count(arch):
        raise ContractError(f"theta length {theta.data.size} != {param_count(arch)}")
    if obs.shape[1] != arch.obs_dim:
        raise ContractError(f"obs dim {obs.shape[1]} != {arch.obs_dim}")
    flat = theta if theta.shape[0] == 1 else T.reshape(theta, (1, theta.data.size))
    offs = arch.layer_offsets()
    h = obs
    n_layers = arch.n_layers
    for i, (r, c) in enumerate(arch.layer_shapes()):
        m = T.reshape(T.slice_(flat, 0, 1, offs[i], offs[i + 1]), (r, c))
        w = T.slice_(m, 0, r, 0, c - 1)
        b = T.transpose(T.slice_(m, 0, r, c - 1, c))
        h = T.add(T.matmul(h, T.transpose(w)), b)
        if i < n_layers - 1:
            h = T.tanh(h)
    return h


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize_params(flat: np.ndarray, arch: PolicyArch) -> bytes:
    """16-byte header (magic, version, layer count), layer dim table, f32 data."""
    shapes = arch.layer_shapes()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", WEIGHTS_VERSION, len(shapes))
    for r, c in shapes:
        out += struct.pack("<II", r, c)
    out += np.asarray(flat, dtype="<f4").tobytes()
    return bytes(out)


def deserialize_params(blob: bytes):
    if blob[:8] != MAGIC:
        raise FormatError("bad magic", 0)
    version, n_layers = struct.unpack_from("<II", blob, 8)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight-file version {version}", 8)
    off = 16
    shapes = []
    for _ in range(n_layers):
        if off + 8 > len(blob):
            raise FormatError("truncated layer table", off)
        r, c = struct.unpack_from("<II", blob, off)
        shapes.append((r, c))
        off += 8
    dims = [shapes[0][1] - 1] + [r for r, _ in shapes]
    arch = PolicyArch(tuple(dims))
    if arch.layer_shapes() != shapes:
        raise FormatError("inconsistent layer dimension table", 16)
    n = param_count(arch)
    if off + 4 * n > len(blob):
        raise FormatError("truncated parameter data", off)
    flat = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
    return flat, arch


def save_policy(path, flat: np.ndarray, arch: PolicyArch) -> None:
    with open(path, "wb") as f:
        f.write(serialize_params(flat, arch))


def load_policy(path):
    with open(path, "rb") as f:
        return deserialize_params(f.read())


def serialize_sections(sections: dict, kind: str = "") -> bytes:
    """Version-2 container: named 2-D float32 sections with an offset table.

    Used for generator/baseline checkpoints; `kind` tags which model family
    wrote the file.
    """
    names = sorted(sections)
    out = bytearray()
    out += MAGIC
    kind_b = kind.encode()
    out += struct.pack("<IIH", SECTIONS_VERSION, len(names), len(kind_b))
    out += kind_b
    header_end = len(out)
    table = bytearray()
    entry_sizes = []
    for name in names:
        nb = name.encode()
        entry_sizes.append(2 + len(nb) + 12)
    data_start = header_end + sum(entry_sizes)
    off = data_start
    payload = bytearray()
    for name in names:
        arr = np.atleast_2d(np.asarray(sections[name], dtype="<f4"))
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<III", off, arr.shape[0], arr.shape[1])
        payload += arr.tobytes()
        off += arr.nbytes
    return bytes(out + table + payload)


def deserialize_sections(blob: bytes):
    if blob[:8] != MAGIC:
        raise FormatError("bad magic", 0)
    version, n_sections, kind_len = struct.unpack_from("<IIH", blob, 8)
    if version != SECTIONS_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    off = 18
    kind = blob[off:off + kind_len].decode()
    off += kind_len
    sections = {}
    for _ in range(n_sections):
        if off + 2 > len(blob):
            raise FormatError("truncated section table", off)
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode()
        off += nlen
        data_off, rows, cols = struct.unpack_from("<III", blob, off)
        off += 12
        end = data_off + rows * cols * 4
        if end > len(blob):
            raise FormatError(f"truncated data for section {name!r}", data_off)
        sections[name] = np.frombuffer(
            blob, dtype="<f4", count=rows * cols, offset=data_off
        ).astype(np.float64).reshape(rows, cols)
    return sections, kind
