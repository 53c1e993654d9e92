"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Everything is float64 numpy underneath: batch sizes here are tiny and
bit-reproducibility matters more than speed. Operations optionally
record themselves on a :class:`Tape`; calling :func:`backward` replays
the tape in exact reverse execution order and accumulates gradients on
the participating tensors. Sampling lives elsewhere - apart from
dropout, every op is deterministic in its inputs.
"""

from __future__ import annotations

import io
from typing import Callable, Iterable, Sequence

import numpy as np

# When enabled (tests, debugging) every op output is checked for NaN/Inf.
CHECK_FINITE = False


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # copy: g may be a view
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    """A constant (no gradient is ever collected for it)."""
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Execution-ordered record of differentiable ops.

    Each record is a closure that pulls the output gradient and pushes
    gradients to the op's inputs. Backward simply walks the list in
    reverse, which is valid because records are appended in execution
    order. Intermediate adjoints are cleared after the sweep so repeated
    backward calls add exactly one more gradient into the leaves. A tape
    is owned by one rollout worker and never shared.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[tuple[Callable[[], None], Tensor]] = []

    def record(self, fn: Callable[[], None], out: Tensor) -> None:
        self._records.append((fn, out))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self._records:
            raise ValueError("tape is empty; loss was not produced through recorded ops")
        loss.accumulate(np.ones_like(loss.data))
        for fn, _ in reversed(self._records):
            fn()
        for _, out in self._records:
            out.grad = None


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate dLoss/dx into every recorded tensor's ``grad``.

    Repeated calls keep accumulating; callers zero grads between steps.
    """
    tape.backward(loss)


def _out(data: np.ndarray, track: bool) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    return Tensor(data, requires_grad=track)


def _tracking(tape: Tape | None, *tensors: Tensor) -> bool:
    return tape is not None and any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, a, b)
    out = _out(a.data + b.data, track)
    if track:
        def back():
            if out.grad is None:
                return
            if a.requires_grad:
                a.accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(out.grad, b.data.shape))
        tape.record(back, out)
    return out


def mul(a: Tensor, b, tape: Tape | None = None) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor, ndarray or scalar."""
    if isinstance(b, Tensor):
        track = _tracking(tape, a, b)
        out = _out(a.data * b.data, track)
        if track:
            def back():
                if out.grad is None:
                    return
                if a.requires_grad:
                    a.accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
                if b.requires_grad:
                    b.accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
            tape.record(back, out)
        return out
    const = np.asarray(b, dtype=np.float64)
    track = _tracking(tape, a)
    out = _out(a.data * const, track)
    if track:
        def back():
            if out.grad is not None:
                a.accumulate(_unbroadcast(out.grad * const, a.data.shape))
        tape.record(back, out)
    return out


def neg(a: Tensor, tape: Tape | None = None) -> Tensor:
    return mul(a, -1.0, tape)


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, a, b)
    out = _out(a.data @ b.data, track)
    if track:
        def back():
            if out.grad is None:
                return
            if a.requires_grad:
                a.accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b.accumulate(a.data.T @ out.grad)
        tape.record(back, out)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """x @ w + b for x of shape (batch, in), w (in, out), b (out,)."""
    if x.data.shape[-1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"linear shape mismatch: x{x.data.shape} w{w.data.shape} b{b.data.shape}"
        )
    track = _tracking(tape, x, w, b)
    out = _out(x.data @ w.data + b.data, track)
    if track:
        def back():
            if out.grad is None:
                return
            if x.requires_grad:
                x.accumulate(out.grad @ w.data.T)
            if w.requires_grad:
                w.accumulate(x.data.T @ out.grad)
            if b.requires_grad:
                b.accumulate(out.grad.sum(axis=0))
        tape.record(back, out)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    out = _out(np.maximum(x.data, 0.0), track)
    if track:
        alive = x.data > 0
        def back():
            if out.grad is not None:
                x.accumulate(out.grad * alive)
        tape.record(back, out)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    y = _expit(x.data)
    out = _out(y, track)
    if track:
        def back():
            if out.grad is not None:
                x.accumulate(out.grad * y * (1.0 - y))
        tape.record(back, out)
    return out


def tanh(x: Tensor, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    y = np.tanh(x.data)
    out = _out(y, track)
    if track:
        def back():
            if out.grad is not None:
                x.accumulate(out.grad * (1.0 - y * y))
        tape.record(back, out)
    return out


def log_sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x); never overflows."""
    track = _tracking(tape, x)
    out = _out(-np.logaddexp(0.0, -x.data), track)
    if track:
        def back():
            if out.grad is not None:
                x.accumulate(out.grad * _expit(-x.data))
        tape.record(back, out)
    return out


def softmax(x: Tensor, axis: int = -1, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out(y, track)
    if track:
        def back():
            if out.grad is None:
                return
            g = out.grad
            x.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        tape.record(back, out)
    return out


def log_softmax(x: Tensor, axis: int = -1, tape: Tape | None = None) -> Tensor:
    """Fused stable form: x - max - log(sum(exp(x - max)))."""
    track = _tracking(tape, x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _out(y, track)
    if track:
        soft = np.exp(y)
        def back():
            if out.grad is None:
                return
            g = out.grad
            x.accumulate(g - soft * g.sum(axis=axis, keepdims=True))
        tape.record(back, out)
    return out


def concat(parts: Sequence[Tensor], axis: int = -1, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, *parts)
    out = _out(np.concatenate([p.data for p in parts], axis=axis), track)
    if track:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def back():
            if out.grad is None:
                return
            for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis if axis >= 0 else out.grad.ndim + axis] = slice(a, b)
                    p.accumulate(out.grad[tuple(sl)])
        tape.record(back, out)
    return out


def slice_cols(x: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    out = _out(x.data[:, start:stop].copy(), track)
    if track:
        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.data)
            g[:, start:stop] = out.grad
            x.accumulate(g)
        tape.record(back, out)
    return out


def reshape(x: Tensor, shape: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    out = _out(x.data.reshape(shape), track)
    if track:
        orig = x.data.shape
        def back():
            if out.grad is not None:
                x.accumulate(out.grad.reshape(orig))
        tape.record(back, out)
    return out


def gather_rows(x: Tensor, idx: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    track = _tracking(tape, x)
    out = _out(x.data[idx], track)
    if track:
        def back():
            if out.grad is None:
                return
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x.accumulate(g)
        tape.record(back, out)
    return out


def repeat_rows(x: Tensor, k: int, tape: Tape | None = None) -> Tensor:
    """Tile every row k times consecutively: (R, D) -> (R*k, D)."""
    track = _tracking(tape, x)
    out = _out(np.repeat(x.data, k, axis=0), track)
    if track:
        r, d = x.data.shape
        def back():
            if out.grad is not None:
                x.accumulate(out.grad.reshape(r, k, d).sum(axis=1))
        tape.record(back, out)
    return out


def tsum(x: Tensor, axis: int | None = None, tape: Tape | None = None) -> Tensor:
    track = _tracking(tape, x)
    out = _out(x.data.sum(axis=axis), track)
    if track:
        def back():
            if out.grad is None:
                return
            if axis is None:
                x.accumulate(np.broadcast_to(out.grad, x.data.shape).copy())
            else:
                x.accumulate(np.broadcast_to(np.expand_dims(out.grad, axis), x.data.shape).copy())
        tape.record(back, out)
    return out


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None,
            tape: Tape | None = None) -> Tensor:
    """Zero entries with probability p and scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training dropout needs an rng")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, keep, tape)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def xavier_init(shape: tuple[int, int], rng: np.random.Generator) -> Tensor:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ValueError(f"xavier_init needs a 2-D shape, got {shape}")
    a = np.sqrt(6.0 / (shape[0] + shape[1]))
    return param(rng.uniform(-a, a, size=shape))


def zeros_init(shape) -> Tensor:
    return param(np.zeros(shape))


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

LSTM_GATES = 4  # input, forget, cell, output


def lstm_params(in_dim: int, hidden: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Standard cell weights; the forget-gate bias starts at 1.0."""
    wx = xavier_init((in_dim, LSTM_GATES * hidden), rng)
    wh = xavier_init((hidden, LSTM_GATES * hidden), rng)
    b = np.zeros(LSTM_GATES * hidden)
    b[hidden:2 * hidden] = 1.0
    return {"wx": wx, "wh": wh, "b": param(b)}


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
              tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    hidden = wh.data.shape[0]
    z = add(linear(x, wx, b, tape), matmul(h, wh, tape), tape)
    i = sigmoid(slice_cols(z, 0, hidden, tape), tape)
    f = sigmoid(slice_cols(z, hidden, 2 * hidden, tape), tape)
    g = tanh(slice_cols(z, 2 * hidden, 3 * hidden, tape), tape)
    o = sigmoid(slice_cols(z, 3 * hidden, 4 * hidden, tape), tape)
    c_new = add(mul(f, c, tape), mul(i, g, tape), tape)
    h_new = mul(o, tanh(c_new, tape), tape)
    return h_new, c_new


def lstm_encode_backward(seq: Sequence[Tensor], params: dict[str, Tensor],
                         tape: Tape | None = None) -> list[Tensor]:
    """Encode a sequence from its end to its start.

    Output position j is the hidden state after consuming inputs
    j, j+1, ..., end in reverse order, i.e. it summarizes the suffix
    starting at j. All inputs must share shape (batch, in_dim).
    """
    if len(seq) == 0:
        raise ValueError("cannot encode an empty sequence")
    batch = seq[0].data.shape[0]
    hidden = params["wh"].data.shape[0]
    for s in seq:
        if s.data.shape != seq[0].data.shape:
            raise ValueError("all sequence steps must share one shape")
    h = tensor(np.zeros((batch, hidden)))
    c = tensor(np.zeros((batch, hidden)))
    outputs: list[Tensor] = [None] * len(seq)  # type: ignore[list-item]
    for j in range(len(seq) - 1, -1, -1):
        h, c = lstm_cell(seq[j], h, c, params["wx"], params["wh"], params["b"], tape)
        outputs[j] = h
    return outputs


# ---------------------------------------------------------------------------
# Parameter store and checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "ccorl-v1"


class ParamStore:
    """Named parameters with their gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def grad_global_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return float(np.sqrt(total))

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            if k not in values:
                raise KeyError(f"missing parameter {k!r}")
            if values[k].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: "
                                 f"{values[k].shape} vs {t.data.shape}")
            t.data = values[k].astype(np.float64).copy()

    # -- checkpoint io ------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(save_params_bytes(self))

    @staticmethod
    def load_raw(path) -> dict[str, np.ndarray]:
        with open(path, "rb") as fh:
            return load_params_bytes(fh.read())


def save_params_bytes(store: ParamStore) -> bytes:
    """``ccorl-v1`` layout: magic line, then per parameter a header line
    "name ndim dims... count" followed by count raw little-endian float64
    values. Round-trips bit-exactly."""
    buf = io.BytesIO()
    buf.write((CHECKPOINT_MAGIC + "\n").encode())
    for name, t in store.items():
        dims = " ".join(str(d) for d in t.data.shape)
        header = f"{name} {t.data.ndim}{' ' + dims if dims else ''} {t.data.size}\n"
        buf.write(header.encode())
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_params_bytes(blob: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(blob)

    def read_line() -> str:
        chars = bytearray()
        while True:
            ch = buf.read(1)
            if not ch or ch == b"\n":
                break
            chars += ch
        return chars.decode()

    if read_line() != CHECKPOINT_MAGIC:
        raise ValueError(f"not a {CHECKPOINT_MAGIC} checkpoint")
    out: dict[str, np.ndarray] = {}
    while True:
        line = read_line()
        if not line:
            break
        parts = line.split()
        name = parts[0]
        ndim = int(parts[1])
        dims = tuple(int(d) for d in parts[2:2 + ndim])
        count = int(parts[2 + ndim])
        raw = buf.read(count * 8)
        if len(raw) != count * 8:
            raise ValueError(f"truncated checkpoint while reading {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def check_gradients(
    build_loss: Callable[[Tape | None], Tensor],
    params: ParamStore,
    *,
    h: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    atol_skip: float = 1e-4,
) -> float:
    """Compare tape gradients against central finite differences.

    ``build_loss(tape)`` must rebuild the same scalar loss from the
    current parameter values (deterministically: no dropout, fixed
    actions). Returns the maximum relative error over the checked
    coordinates; coordinates where both gradients are below
    ``atol_skip`` are skipped (they sit under the FD noise floor).
    """
    t = Tape()
    params.zero_grads()
    loss = build_loss(t)
    backward(loss, t)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            if rng is None:
                raise ValueError("sampling coordinates needs an rng")
            coords = rng.choice(n, size=coords_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(build_loss(None).data)
            flat[c] = orig - h
            down = float(build_loss(None).data)
            flat[c] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[c])
            if max(abs(a), abs(numeric)) < atol_skip:
                continue
            rel = abs(a - numeric) / max(abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
