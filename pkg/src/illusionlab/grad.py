"""Dense float64 tensors with tape-recorded reverse-mode gradients.

The primitive set is deliberately small: exactly what a compact
convolutional classifier, a convolutional denoiser, and input-gradient
attack loops need. Tensors are immutable values safe to share; a Tape
owns the record of one forward pass and belongs to a single logical
thread of execution.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GradError(ValueError):
    """Invalid gradient request (non-scalar loss, tensor not on tape)."""


class Tensor:
    """Immutable dense value: float64 components, all finite."""

    __slots__ = ("array",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor components must be finite")
        arr.flags.writeable = False
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class _Node:
    __slots__ = ("op", "output", "inputs", "grad_fn", "forward_fn")

    def __init__(self, op, output, inputs, grad_fn, forward_fn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.forward_fn = forward_fn


def _require(cond: bool, op: str, detail: str):
    if not cond:
        raise ShapeError(f"{op}: {detail}")


def _conv_windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, OH, OW, C, kh, kw)
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._seen: set[int] = set()

    def watch(self, t: Tensor):
        """Mark a leaf tensor as participating in this pass."""
        self._seen.add(id(t))

    def _record(self, op, out_array, inputs, grad_fn, forward_fn) -> Tensor:
        out = Tensor(out_array)
        for t in inputs:
            self._seen.add(id(t))
        self._seen.add(id(out))
        self.nodes.append(_Node(op, out, tuple(inputs), grad_fn, forward_fn))
        return out

    def verify_replay(self):
        """Recompute every recorded node; raise if any output differs bit-wise."""
        for node in self.nodes:
            again = node.forward_fn()
            if not np.array_equal(again, node.output.array):
                raise GradError(f"replay mismatch in {node.op}")

    # ------------------------------------------------------------------
    # primitives

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        _require(a.array.ndim == 2 and b.array.ndim == 2, "matmul",
                 f"need 2-D operands, got {a.shape} and {b.shape}")
        _require(a.shape[1] == b.shape[0], "matmul",
                 f"inner dimensions differ: {a.shape} @ {b.shape}")

        def fwd():
            return a.array @ b.array

        def grad(g):
            return g @ b.array.T, a.array.T @ g

        return self._record("matmul", fwd(), (a, b), grad, fwd)

    def conv2d(self, x: Tensor, k: Tensor) -> Tensor:
        """Cross-correlation, stride 1, no padding. x: (N,H,W,Cin), k: (kh,kw,Cin,Cout)."""
        _require(x.array.ndim == 4, "conv2d", f"input must be (N,H,W,C), got {x.shape}")
        _require(k.array.ndim == 4, "conv2d", f"kernel must be (kh,kw,Cin,Cout), got {k.shape}")
        kh, kw, cin, cout = k.shape
        _require(x.shape[3] == cin, "conv2d",
                 f"channel mismatch: input {x.shape} vs kernel {k.shape}")
        _require(x.shape[1] >= kh and x.shape[2] >= kw, "conv2d",
                 f"kernel {k.shape} larger than input {x.shape}")

        def fwd():
            win = _conv_windows(x.array, kh, kw)
            return np.tensordot(win, k.array, axes=((4, 5, 3), (0, 1, 2)))

        def grad(g):
            win = _conv_windows(x.array, kh, kw)
            dk = np.tensordot(win, g, axes=((0, 1, 2), (0, 1, 2)))
            dk = dk.transpose(1, 2, 0, 3)
            oh, ow = g.shape[1], g.shape[2]
            # (N, OH, OW, kh, kw, Cin); scatter-add each kernel offset
            dcol = np.tensordot(g, k.array, axes=((3,), (3,)))
            dx = np.zeros_like(x.array)
            for di in range(kh):
                for dj in range(kw):
                    dx[:, di : di + oh, dj : dj + ow, :] += dcol[:, :, :, di, dj, :]
            return dx, dk

        return self._record("conv2d", fwd(), (x, k), grad, fwd)

    def bias_add(self, x: Tensor, b: Tensor) -> Tensor:
        _require(b.array.ndim == 1, "bias_add", f"bias must be 1-D, got {b.shape}")
        _require(x.shape[-1] == b.shape[0], "bias_add",
                 f"last dimension of {x.shape} != bias length {b.shape[0]}")

        def fwd():
            return x.array + b.array

        def grad(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)

        return self._record("bias_add", fwd(), (x, b), grad, fwd)

    def relu(self, x: Tensor) -> Tensor:
        def fwd():
            return np.maximum(x.array, 0.0)

        def grad(g):
            return (g * (x.array > 0.0),)

        return self._record("relu", fwd(), (x,), grad, fwd)

    def maxpool2(self, x: Tensor) -> Tensor:
        """2x2 max pooling, stride 2; trailing odd row/column is dropped."""
        _require(x.array.ndim == 4, "maxpool2", f"input must be (N,H,W,C), got {x.shape}")
        n, h, w, c = x.shape
        _require(h >= 2 and w >= 2, "maxpool2", f"input {x.shape} smaller than window")
        oh, ow = h // 2, w // 2

        def windows():
            crop = x.array[:, : 2 * oh, : 2 * ow, :]
            return (crop.reshape(n, oh, 2, ow, 2, c)
                        .transpose(0, 1, 3, 5, 2, 4)
                        .reshape(n, oh, ow, c, 4))

        def fwd():
            return windows().max(axis=4)

        def grad(g):
            win = windows()
            idx = win.argmax(axis=4)
            scat = np.zeros_like(win)
            np.put_along_axis(scat, idx[..., None], g[..., None], axis=4)
            back = (scat.reshape(n, oh, ow, c, 2, 2)
                        .transpose(0, 1, 4, 2, 5, 3)
                        .reshape(n, 2 * oh, 2 * ow, c))
            full = np.zeros_like(x.array)
            full[:, : 2 * oh, : 2 * ow, :] = back
            return (full,)

        return self._record("maxpool2", fwd(), (x,), grad, fwd)

    def softmax_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean cross-entropy of softmax(logits) at integer labels. logits: (N,K)."""
        _require(logits.array.ndim == 2, "softmax_cross_entropy",
                 f"logits must be (N,K), got {logits.shape}")
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        n, k = logits.shape
        _require(y.shape[0] == n, "softmax_cross_entropy",
                 f"{n} logit rows vs {y.shape[0]} labels")
        if np.any(y < 0) or np.any(y >= k):
            raise ValueError(f"labels out of range [0,{k}): {y}")

        def fwd():
            z = logits.array
            m = z.max(axis=1, keepdims=True)
            lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
            picked = z[np.arange(n), y][:, None]
            return np.mean(lse - picked)

        def grad(g):
            z = logits.array
            m = z.max(axis=1, keepdims=True)
            e = np.exp(z - m)
            p = e / e.sum(axis=1, keepdims=True)
            p[np.arange(n), y] -= 1.0
            return (p * (g / n),)

        return self._record("softmax_cross_entropy", fwd(), (logits,), grad, fwd)

    def mse(self, pred: Tensor, target) -> Tensor:
        """Mean squared error against a constant target array."""
        t = np.asarray(target, dtype=np.float64)
        _require(t.shape == pred.shape, "mse",
                 f"target shape {t.shape} != prediction shape {pred.shape}")

        def fwd():
            d = pred.array - t
            return np.mean(d * d) if d.size else np.float64(0.0)

        def grad(g):
            return ((pred.array - t) * (2.0 * g / max(pred.size, 1)),)

        return self._record("mse", fwd(), (pred,), grad, fwd)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _require(a.shape == b.shape, "add", f"shapes differ: {a.shape} vs {b.shape}")

        def fwd():
            return a.array + b.array

        def grad(g):
            return g, g

        return self._record("add", fwd(), (a, b), grad, fwd)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def fwd():
            return a.array * c

        def grad(g):
            return (g * c,)

        return self._record("scale", fwd(), (a,), grad, fwd)

    def sum(self, a: Tensor) -> Tensor:
        def fwd():
            return np.sum(a.array)

        def grad(g):
            return (np.full(a.shape, float(g)),)

        return self._record("sum", fwd(), (a,), grad, fwd)

    def reshape(self, a: Tensor, shape) -> Tensor:
        shape = tuple(int(s) for s in shape)
        _require(int(np.prod(shape, dtype=np.int64)) == a.size, "reshape",
                 f"cannot reshape {a.shape} to {shape}")

        def fwd():
            return a.array.reshape(shape)

        def grad(g):
            return (g.reshape(a.shape),)

        return self._record("reshape", fwd(), (a,), grad, fwd)

    def pad2d(self, x: Tensor, pad: int) -> Tensor:
        """Zero-pad the two spatial axes of an (N,H,W,C) tensor by `pad` on each side."""
        _require(x.array.ndim == 4, "pad2d", f"input must be (N,H,W,C), got {x.shape}")
        _require(pad >= 0, "pad2d", f"negative pad {pad}")

        def fwd():
            return np.pad(x.array, ((0, 0), (pad, pad), (pad, pad), (0, 0)))

        def grad(g):
            if pad == 0:
                return (g,)
            return (g[:, pad:-pad, pad:-pad, :],)

        return self._record("pad2d", fwd(), (x,), grad, fwd)


def gradients(tape: Tape, loss: Tensor, wrts) -> list[Tensor]:
    """One backward walk returning d(loss)/d(w) for every tensor in `wrts`.

    Each recorded node is visited exactly once. A target the loss does not
    depend on gets zeros. Raises GradError for a non-scalar loss or a
    target that never participated in the forward pass.
    """
    if loss.shape != ():
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    wanted = {id(w) for w in wrts}
    for w in wrts:
        if id(w) not in tape._seen:
            raise GradError("requested tensor is not on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, ig in zip(node.inputs, node.grad_fn(g)):
            acc = grads.get(id(t))
            grads[id(t)] = ig if acc is None else acc + ig
        if id(node.output) in wanted:
            # an intermediate target; keep the grad the pop consumed
            grads[id(node.output)] = g
    return [Tensor(grads.get(id(w), np.zeros(w.shape))) for w in wrts]


def gradient(tape: Tape, loss: Tensor, wrt: Tensor) -> Tensor:
    """d(loss)/d(wrt) for a scalar loss produced on `tape`."""
    return gradients(tape, loss, [wrt])[0]


def finite_difference_check(f, point: Tensor, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(tape, x)` must evaluate a scalar loss for input `x` on `tape`.
    The relative error of component i is |a_i - n_i| / max(|a_i|, |n_i|, 1e-8).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    tape = Tape()
    tape.watch(point)
    loss = f(tape, point)
    analytic = gradient(tape, loss, point).array
    base = point.array
    numeric = np.empty(point.size)
    for i in range(point.size):
        probe = np.zeros(point.size)
        probe[i] = step
        probe = probe.reshape(point.shape)
        plus = f(Tape(), Tensor(base + probe)).item()
        minus = f(Tape(), Tensor(base - probe)).item()
        numeric[i] = (plus - minus) / (2.0 * step)
    numeric = numeric.reshape(point.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
