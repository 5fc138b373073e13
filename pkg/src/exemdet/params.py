"""Named parameter storage, the Adam optimizer, and checkpoint serialization.

Parameters live in a :class:`ParamStore` keyed by dotted names. ``adam_step``
updates a deterministic (sorted-key) order so repeated runs are bit-identical.
Checkpoints round-trip exactly: float64 payloads are written little-endian with
no loss.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import _binio
from .autograd import Tensor
from .errors import DataContractError, MissingGradientError

CHECKPOINT_MAGIC = b"EGCP"
CHECKPOINT_VERSION = 1


@dataclass
class AdamConfig:
    """Hyper-parameters for the Adam update rule."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class _AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class ParamStore:
    """An ordered mapping from dotted names to trainable tensors."""

    _params: dict[str, Tensor] = field(default_factory=dict)
    _slots: dict[str, _AdamSlot] = field(default_factory=dict)

    def add(self, key: str, value: np.ndarray) -> Tensor:
        if key in self._params:
            raise KeyError(f"parameter '{key}' already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[key] = t
        return t

    def __getitem__(self, key: str) -> Tensor:
        try:
            return self._params[key]
        except KeyError:
            raise KeyError(f"parameter '{key}' not found") from None

    def __contains__(self, key: str) -> bool:
        return key in self._params

    def __len__(self) -> int:
        return len(self._params)

    def keys(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for key in sorted(self._params):
            yield key, self._params[key]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def clone(self) -> "ParamStore":
        """Deep copy of parameter values; optimizer state is not copied."""
        other = ParamStore()
        for key, t in self._params.items():
            other.add(key, t.data.copy())
        return other

    def data_equal(self, other: "ParamStore") -> bool:
        if sorted(self._params) != sorted(other._params):
            return False
        return all(np.array_equal(self._params[k].data, other._params[k].data)
                   for k in self._params)

    def reset_optimizer(self) -> None:
        """Drop accumulated Adam moments so the next phase starts fresh.

        Checkpoints persist parameter values only, so a run split across
        processes at a phase boundary would restart the optimizer anyway;
        resetting here keeps fused and split runs on the same trajectory.
        """
        self._slots.clear()

    def _slot(self, key: str) -> _AdamSlot:
        slot = self._slots.get(key)
        if slot is None:
            data = self._params[key].data
            slot = _AdamSlot(m=np.zeros_like(data), v=np.zeros_like(data))
            self._slots[key] = slot
        return slot


def adam_step(store: ParamStore, config: AdamConfig,
              keys: Iterable[str] | None = None) -> None:
    """Apply one Adam update to ``keys`` (default: every parameter).

    Every stepped parameter must carry a gradient; a missing one raises
    :class:`MissingGradientError` naming the offending key. First and second
    moments are bias-corrected per parameter; gradients are cleared afterward.
    """
    stepped = sorted(keys) if keys is not None else store.keys()
    for key in stepped:
        if store[key].grad is None:
            raise MissingGradientError(key)
    for key in stepped:
        p = store[key]
        g = p.grad
        slot = store._slot(key)
        slot.t += 1
        slot.m = config.beta1 * slot.m + (1.0 - config.beta1) * g
        slot.v = config.beta2 * slot.v + (1.0 - config.beta2) * (g * g)
        m_hat = slot.m / (1.0 - config.beta1 ** slot.t)
        v_hat = slot.v / (1.0 - config.beta2 ** slot.t)
        p.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    for key in stepped:
        store[key].grad = None


def save_checkpoint(store: ParamStore, path: str | os.PathLike) -> None:
    """Write every parameter (sorted by key) to a binary checkpoint file."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _binio.write_u32(fh, CHECKPOINT_VERSION)
        _binio.write_u32(fh, len(store))
        for key, tensor in store.items():
            _binio.write_str(fh, key)
            shape = tensor.data.shape
            _binio.write_u32(fh, len(shape))
            for dim in shape:
                _binio.write_u32(fh, dim)
            _binio.write_f64_array(fh, tensor.data)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ParamStore:
    """Read a checkpoint back into a fresh store; values round-trip exactly."""
    store = ParamStore()
    with open(path, "rb") as fh:
        _binio.expect_magic(fh, CHECKPOINT_MAGIC, "checkpoint")
        version = _binio.read_u32(fh)
        if version != CHECKPOINT_VERSION:
            raise DataContractError(f"unsupported checkpoint version {version}")
        count = _binio.read_u32(fh)
        for _ in range(count):
            key = _binio.read_str(fh)
            rank = _binio.read_u32(fh)
            shape = tuple(_binio.read_u32(fh) for _ in range(rank))
            store.add(key, _binio.read_f64_array(fh, shape))
        trailing = fh.read(1)
        if trailing:
            raise DataContractError("checkpoint has trailing bytes after last parameter")
    return store
