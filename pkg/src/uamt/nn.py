"""Parameter containers, optimizer, EMA transfer, and checkpoint I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tape import Tensor

CHECKPOINT_MAGIC = b"UAMT"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised for shape/alignment/argument errors in the numerical kernel."""


@dataclass
class ParamSet:
    """Named, ordered collection of float64 parameter arrays."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0 or any(d <= 0 for d in arr.shape):
            raise ConfigurationError(f"parameter {name!r} has empty shape {arr.shape}")
        self.entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.entries.items()})

    def aligned_with(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self.entries[k].shape == other.entries[k].shape for k in self.entries
        )

    def as_tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward/backward pass."""
        return {k: Tensor(v) for k, v in self.entries.items()}

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.entries.items()})

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        return self.aligned_with(other) and all(
            np.allclose(self.entries[k], other.entries[k], atol=atol, rtol=rtol)
            for k in self.entries
        )


def grads_from_tensors(tensors: dict[str, Tensor]) -> ParamSet:
    return ParamSet({k: t.grad.copy() for k, t in tensors.items()})


def dropout_mask(shape, p: float, stream: RngStream, enabled: bool):
    """0/1 survivor mask and keep probability for inverted dropout."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not enabled or p == 0.0:
        return np.ones(shape, dtype=np.float64), 1.0
    gen = stream.generator()
    mask = (gen.random(shape) >= p).astype(np.float64)
    return mask, 1.0 - p


def dropout(
    values: np.ndarray, p: float, stream: RngStream, enabled: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout on a plain array; returns (output, mask)."""
    mask, keep = dropout_mask(np.shape(values), p, stream, enabled)
    return np.asarray(values, dtype=np.float64) * (mask / keep), mask


@dataclass
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(
    params: ParamSet,
    grads: ParamSet,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """One Adam update with bias correction; mutates `state`, returns new params."""
    if not (params.aligned_with(grads) and params.aligned_with(state.m)):
        raise ConfigurationError("params, grads, and optimizer state are misaligned")
    state.t += 1
    t = state.t
    out = ParamSet()
    for name in params.names():
        g = grads[name]
        m = state.m.entries[name]
        v = state.v.entries[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        out.add(name, params[name] - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    """Elementwise w_t <- alpha * w_t + (1 - alpha) * w_s."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"EMA keep ratio must be in [0, 1], got {alpha}")
    if not teacher.aligned_with(student):
        raise ConfigurationError("teacher and student parameter sets are misaligned")
    out = ParamSet()
    for name in teacher.names():
        out.add(name, alpha * teacher[name] + (1.0 - alpha) * student[name])
    return out


def grad_check(loss_fn, params: ParamSet, step: float = 1e-5) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    `loss_fn` maps a dict of parameter Tensors to a scalar Tensor.
    Returns {"max_rel_error": float, "worst_param": str}.
    """
    tensors = params.as_tensors()
    loss = loss_fn(tensors)
    if not np.isfinite(loss.data):
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    worst = 0.0
    worst_name = ""
    probe = params.copy()
    for name in params.names():
        flat = probe.entries[name].reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn(probe.as_tensors()).item()
            flat[i] = orig - step
            lo = loss_fn(probe.as_tensors()).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            denom = max(1e-8, abs(fd) + abs(a_flat[i]))
            rel = abs(fd - a_flat[i]) / denom
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return {"max_rel_error": worst, "worst_param": worst_name}


# -- checkpoint format -------------------------------------------------------
# magic "UAMT" | version u32 LE | entry count u32 LE | per entry:
#   name length u16 LE | name UTF-8 | rank u8 | dims u32 LE each | float64 LE values


def save_checkpoint(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.entries)))
        for name, arr in params.entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims))
        values = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        params.add(name, values.reshape(dims))
    if off != len(data):
        raise ConfigurationError(f"{path}: {len(data) - off} trailing bytes")
    return params
