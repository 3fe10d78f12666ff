"""Dense float64 tensors with a reverse-mode gradient tape.

Design notes:

* Values are numpy float64 arrays.  There is no general broadcasting; each
  operation accepts the exact shapes it documents and raises on anything
  else, listing both shapes in the message.
* Recording happens only inside a ``with Tape():`` block.  Outside a tape,
  the same functions run eagerly and produce plain (untracked) tensors, so
  inference costs nothing extra.
* A tape is built for one forward pass, consumed by one ``backward`` call,
  and then dead.  Gradients accumulate into ``Tensor.grad`` (summing over
  fan-out), so a parameter used in several places gets the sum of all paths.
* Every op checks its output for NaN/Inf: a single poisoned value would
  otherwise surface much later as a mysterious training collapse or a bogus
  finite-difference failure.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

# Flip off only when profiling; tests run with checks on.
FINITE_CHECKS = True

_TAPES: list["Tape"] = []


def _check_finite(arr, where):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor creation")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return detach(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def abs(self):
        return tabs(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Records ops while active; ``backward`` replays them in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and accumulate grads into every tracked
        tensor reachable from ``loss``.  The tape is dead afterwards."""
        if self._consumed:
            raise NumericError("tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            for node in reversed(self.nodes):
                gout = node.out.grad
                if gout is None:
                    continue
                grads = node.bwd(gout)
                for inp, g in zip(node.inputs, grads):
                    if g is None or not inp.requires_grad:
                        continue
                    if inp.grad is None:
                        inp.grad = g
                    else:
                        inp.grad = inp.grad + g
        self.nodes.clear()


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _result(data, inputs, where):
    """Build the output tensor of an op; tracked iff a tape is active and
    some input is tracked."""
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, where)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = bool(_TAPES) and any(i.requires_grad for i in inputs)
    out.grad = None
    return out


def custom_op(out_data, inputs, bwd, name="custom_op"):
    """Register a differentiable op from outside this module.

    ``bwd(gout)`` must return one gradient array (or None) per input, in
    order.  It runs only if some input is tracked, so it may capture
    whatever forward intermediates it needs.
    """
    out = _result(out_data, inputs, name)
    if out.requires_grad:
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), bwd))
    return out


def _lift(value, shape):
    """Turn a python number into a constant tensor of the given shape."""
    if isinstance(value, Tensor):
        return value
    arr = np.broadcast_to(np.float64(value), shape).copy()
    return Tensor(arr)


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


# ---------------------------------------------------------------------------
# elementwise / scalar arithmetic


def add(a, b):
    a = _lift(a, getattr(b, "shape", ()))
    b = _lift(b, a.shape)
    _check_same_shape(a, b, "add")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            return (g if a.requires_grad else None,
                    g if b.requires_grad else None)
        _TAPES[-1].nodes.append(_Node(out, (a, b), bwd))
    return out


def sub(a, b):
    a = _lift(a, getattr(b, "shape", ()))
    b = _lift(b, a.shape)
    _check_same_shape(a, b, "sub")
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bwd(g):
            return (g if a.requires_grad else None,
                    -g if b.requires_grad else None)
        _TAPES[-1].nodes.append(_Node(out, (a, b), bwd))
    return out


def mul(a, b):
    a = _lift(a, getattr(b, "shape", ()))
    b = _lift(b, a.shape)
    _check_same_shape(a, b, "mul")
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bwd(g):
            return (g * bd if a.requires_grad else None,
                    g * ad if b.requires_grad else None)
        _TAPES[-1].nodes.append(_Node(out, (a, b), bwd))
    return out


def neg(a):
    out = _result(-a.data, (a,), "neg")
    if out.requires_grad:
        _TAPES[-1].nodes.append(_Node(out, (a,), lambda g: (-g,)))
    return out


def tabs(a):
    """Elementwise absolute value; subgradient 0 at exactly 0."""
    out = _result(np.abs(a.data), (a,), "abs")
    if out.requires_grad:
        sign = np.sign(a.data)
        _TAPES[-1].nodes.append(_Node(out, (a,), lambda g: (g * sign,)))
    return out


def tsum(a):
    out = _result(np.sum(a.data), (a,), "sum")
    if out.requires_grad:
        shape = a.data.shape
        _TAPES[-1].nodes.append(
            _Node(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),)))
    return out


def tmean(a):
    if a.data.size == 0:
        raise ValueError("mean of an empty tensor")
    out = _result(np.mean(a.data), (a,), "mean")
    if out.requires_grad:
        shape = a.data.shape
        inv = 1.0 / a.data.size
        _TAPES[-1].nodes.append(
            _Node(out, (a,), lambda g: (np.broadcast_to(g * inv, shape).copy(),)))
    return out


def detach(a: Tensor) -> Tensor:
    """Copy of ``a`` cut loose from the tape: grads never flow through."""
    return Tensor(a.data.copy())


def weighted_sum(a: Tensor, weights) -> Tensor:
    """sum(a * weights) with constant weights; a single fused node.

    The workhorse for region means: weights hold +-1/|region| entries and
    zeros elsewhere, so empty regions simply contribute nothing.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.data.shape:
        raise ValueError(f"weighted_sum: shape mismatch {a.data.shape} vs {w.shape}")
    out = _result(np.sum(a.data * w), (a,), "weighted_sum")
    if out.requires_grad:
        _TAPES[-1].nodes.append(_Node(out, (a,), lambda g: (g * w,)))
    return out


def select0(a: Tensor, index: int) -> Tensor:
    """a[index] along axis 0 (e.g. one classifier row, one batch sample)."""
    n = a.data.shape[0]
    if not 0 <= index < n:
        raise ValueError(f"select0: index {index} out of range for axis of size {n}")
    out = _result(a.data[index].copy(), (a,), "select0")
    if out.requires_grad:
        shape = a.data.shape
        def bwd(g):
            full = np.zeros(shape)
            full[index] = g
            return (full,)
        _TAPES[-1].nodes.append(_Node(out, (a,), bwd))
    return out


# ---------------------------------------------------------------------------
# neural-net ops


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        mask = x.data > 0.0
        _TAPES[-1].nodes.append(_Node(out, (x,), lambda g: (g * mask,)))
    return out


def _im2col(xp, kh, kw, stride, oh, ow):
    """(N,C,Hp,Wp) padded input -> (N, C*kh*kw, oh*ow) patch matrix."""
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols, n, c, hp, wp, kh, kw, stride, oh, ow):
    """Scatter-add the patch-matrix gradient back onto the padded input."""
    g6 = gcols.reshape(n, c, kh, kw, oh, ow)
    gx = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g6[:, :, i, j]
    return gx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel``, no bias.

    ``x`` is (C,H,W) or batched (N,C,H,W); ``kernel`` is (Cout,Cin,kh,kw).
    Implemented as im2col + one matmul so the inner loop is a BLAS call;
    backward is the transposed matmul plus a scatter-add (col2im).
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if kernel.data.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d, got shape {kernel.data.shape}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: input must be (C,H,W) or (N,C,H,W), got shape {x.data.shape}")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = kernel.data.shape
    if cin != c:
        raise ValueError(
            f"conv2d: input channels {xd.shape} do not match kernel {kernel.data.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d: kernel {kernel.data.shape} does not fit input {x.data.shape} "
            f"with stride={stride} padding={padding}")
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(kmat, cols).reshape(n, cout, oh, ow)
    if single:
        out_data = out_data[0]
    out = _result(out_data, (x, kernel), "conv2d")
    if out.requires_grad:
        hp, wp = xp.shape[2], xp.shape[3]
        def bwd(g):
            gm = (g[None] if single else g).reshape(n, cout, oh * ow)
            gk = gx = None
            if kernel.requires_grad:
                gk = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(kernel.data.shape)
            if x.requires_grad:
                gcols = np.matmul(kmat.T, gm)
                gxp = _col2im(gcols, n, c, hp, wp, kh, kw, stride, oh, ow)
                if padding:
                    gxp = gxp[:, :, padding:hp - padding, padding:wp - padding]
                gx = gxp[0] if single else gxp
            return (gx, gk)
        _TAPES[-1].nodes.append(_Node(out, (x, kernel), bwd))
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes: (D,H,W)->(D,) or (N,D,H,W)->(N,D)."""
    if x.data.ndim not in (3, 4):
        raise ValueError(f"global_average_pool: need 3-d or 4-d input, got shape {x.data.shape}")
    out = _result(x.data.mean(axis=(-2, -1)), (x,), "global_average_pool")
    if out.requires_grad:
        shape = x.data.shape
        inv = 1.0 / (shape[-2] * shape[-1])
        def bwd(g):
            return (np.broadcast_to((g * inv)[..., None, None], shape).copy(),)
        _TAPES[-1].nodes.append(_Node(out, (x,), bwd))
    return out


def linear_no_bias(x: Tensor, weight: Tensor) -> Tensor:
    """logits = weight @ x for (D,) input, or x @ weight.T for (N,D)."""
    if weight.data.ndim != 2:
        raise ValueError(f"linear_no_bias: weight must be 2-d, got shape {weight.data.shape}")
    if x.data.ndim == 1:
        if x.data.shape[0] != weight.data.shape[1]:
            raise ValueError(
                f"linear_no_bias: input {x.data.shape} does not match weight {weight.data.shape}")
        out_data = weight.data @ x.data
    elif x.data.ndim == 2:
        if x.data.shape[1] != weight.data.shape[1]:
            raise ValueError(
                f"linear_no_bias: input {x.data.shape} does not match weight {weight.data.shape}")
        out_data = x.data @ weight.data.T
    else:
        raise ValueError(f"linear_no_bias: input must be 1-d or 2-d, got shape {x.data.shape}")
    out = _result(out_data, (x, weight), "linear_no_bias")
    if out.requires_grad:
        xd, wd = x.data, weight.data
        def bwd(g):
            if xd.ndim == 1:
                gx = wd.T @ g if x.requires_grad else None
                gw = np.outer(g, xd) if weight.requires_grad else None
            else:
                gx = g @ wd if x.requires_grad else None
                gw = g.T @ xd if weight.requires_grad else None
            return (gx, gw)
        _TAPES[-1].nodes.append(_Node(out, (x, weight), bwd))
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking


class GradCheckReport:
    """Outcome of a finite-difference check.

    ``per_param`` maps parameter name -> worst relative error among its
    components; ``passed`` is True when every entry is <= ``tol``.
    """

    def __init__(self, per_param, eps, tol):
        self.per_param = dict(per_param)
        self.eps = eps
        self.tol = tol
        self.max_rel_err = max(self.per_param.values()) if self.per_param else 0.0
        self.passed = self.max_rel_err <= tol

    def summary(self):
        lines = [
            f"grad_check eps={self.eps:g} tol={self.tol:g} "
            f"max_rel_err={self.max_rel_err:.3e} {'PASS' if self.passed else 'FAIL'}"
        ]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: max_rel_err={err:.3e}")
        return "\n".join(lines)


# Relative error uses max(|analytic|, |numeric|, floor) as denominator; the
# floor keeps the ratio meaningful where the true derivative is ~0 and the
# central difference is pure cancellation noise (~1e-10 at eps=1e-5).
_REL_ERR_FLOOR = 1e-3


def grad_check(loss_fn, params, eps=1e-5, tol=1e-6, corrupt_scale=None):
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``params`` maps name -> leaf Tensor (requires_grad=True); ``loss_fn``
    must rebuild the loss from those tensors on every call and be
    deterministic — that is checked first with two bitwise-compared
    evaluations.  ``corrupt_scale`` multiplies the analytic gradient of the
    first parameter before comparison (a self-test hook: a correct checker
    must flag the corruption).
    """
    params = dict(params)
    if not params:
        raise ValueError("grad_check: no parameters given")
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"grad_check: parameter {name!r} has requires_grad=False")

    def eval_loss():
        loss = loss_fn()
        if loss.data.size != 1:
            raise ValueError(f"grad_check: loss must be scalar, got shape {loss.data.shape}")
        return float(loss.data.reshape(()))

    v1 = eval_loss()
    v2 = eval_loss()
    if v1 != v2 or np.isnan(v1):
        raise NumericError(
            f"grad_check: loss_fn is not deterministic ({v1!r} vs {v2!r}); "
            "freeze masks/partitions/extrema before checking")

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = np.array(p.grad, dtype=np.float64)
    if corrupt_scale is not None:
        first = next(iter(analytic))
        analytic[first] = analytic[first] * corrupt_scale

    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_loss()
            flat[i] = orig - eps
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), _REL_ERR_FLOOR)
            worst = max(worst, abs(a - numeric) / denom)
        per_param[name] = worst
    return GradCheckReport(per_param, eps, tol)
