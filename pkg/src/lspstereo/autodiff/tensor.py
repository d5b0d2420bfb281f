"""Dense tensor value type and the recording tape used for reverse-mode gradients.

Every differentiable operator computes its forward result with numpy and, when a
:class:`Tape` is active and at least one input requires a gradient, appends an
:class:`OpRecord` holding a backward closure. ``Tape.backward`` replays the
records in reverse creation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MAX_RANK = 5
_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array with an optional, lazily allocated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class OpRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    index: int = 0
    saved: dict = field(default_factory=dict)


_ACTIVE: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Records differentiable operations executed inside its ``with`` block.

    The tape is not cleared by :meth:`backward`, so replaying it twice without
    zeroing leaf gradients accumulates them twice.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def add(self, record: OpRecord) -> None:
        record.index = len(self.records)
        self.records.append(record)
        self._produced.add(id(record.output))

    def backward(self, output: Tensor, grad=None) -> None:
        if grad is None:
            if output.data.size != 1:
                raise ValueError("backward on a non-scalar output needs an explicit seed gradient")
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(grad, dtype=output.dtype).reshape(output.shape)
        if id(output) not in self._produced:
            if output.requires_grad:
                output.accumulate_grad(seed)
            return
        pending: dict[int, np.ndarray] = {id(output): seed}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in self._produced:
                    if key in pending:
                        pending[key] = pending[key] + gi
                    else:
                        pending[key] = gi
                else:
                    inp.accumulate_grad(np.asarray(gi, dtype=inp.dtype))


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward, **saved) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log the op on the active tape if needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.add(OpRecord(op=op, inputs=tuple(inputs), output=out, backward=backward, saved=saved))
    return out


# ---------------------------------------------------------------------------
# branch probe: piecewise ops report which piece each element fell on, so a
# finite-difference check can tell when a perturbation crossed a kink


class BranchProbe:
    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self) -> "BranchProbe":
        _PROBES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _PROBES.remove(self)

    def signature(self) -> tuple:
        return tuple(self.patterns)


_PROBES: list[BranchProbe] = []


def note_branch(*selectors: np.ndarray) -> None:
    """Report the piece selection of a piecewise op (cheap no-op when no probe is active)."""
    if _PROBES:
        probe = _PROBES[-1]
        for s in selectors:
            probe.patterns.append(np.ascontiguousarray(s).tobytes())
