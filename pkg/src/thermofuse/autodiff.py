"""Minimal reverse-mode automatic differentiation engine.

Provides exactly the tensor operations the thermal encoder networks need:
dense layers, 3D cross-correlation, relu/reshape/concat plumbing, MSE,
Gaussian KL divergence, the reparameterization trick, nearest-neighbor
upsampling, and an Adam optimizer.

Design constraints:
    - float64 by default so finite-difference gradient checks are meaningful
    - single-threaded graph construction/backward; reductions use numpy's
      fixed summation order, so repeated runs are bit-identical
    - no broadcasting beyond what the listed operations need
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message reports both sides."""


class GradientError(RuntimeError):
    """Raised on non-finite gradients or an invalid backward call."""


def _as_triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected int or 3-tuple, got {v!r}")
    return t


class Tensor:
    """N-dimensional array node in the autodiff graph.

    Leaves created with ``requires_grad=True`` receive a populated ``.grad``
    after ``backward``. Interior nodes record their parents and a closure that
    scatters the incoming gradient back to them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _needs_grad(self) -> bool:
        return self.requires_grad or self._backward_fn is not None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make_node(data: np.ndarray, parents: Sequence[Tensor],
               backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p._needs_grad() for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Besides equal shapes, two broadcast forms are
    supported: a single-element operand, and a batch-broadcast operand whose
    shape equals the other's shape without the leading batch axis (used for
    bias terms shared across the batch)."""
    if (a.shape != b.shape and a.size != 1 and b.size != 1
            and a.shape[1:] != b.shape and b.shape[1:] != a.shape):
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")

    def backward_fn(g):
        for t in (a, b):
            if not t._needs_grad():
                continue
            if t.shape == g.shape:
                t._accumulate(g)
            elif t.size == 1:
                t._accumulate(np.sum(g).reshape(t.shape))
            else:
                t._accumulate(np.sum(g, axis=0))

    return _make_node(a.data + b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        if a._needs_grad():
            a._accumulate(c * g)

    return _make_node(c * a.data, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")

    def backward_fn(g):
        if a._needs_grad():
            a._accumulate(g * b.data)
        if b._needs_grad():
            b._accumulate(g * a.data)

    return _make_node(a.data * b.data, (a, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        if x._needs_grad():
            x._accumulate(g * mask)

    return _make_node(np.where(mask, x.data, 0.0), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = x.shape

    def backward_fn(g):
        if x._needs_grad():
            x._accumulate(g.reshape(in_shape))

    return _make_node(x.data.reshape(shape), (x,), backward_fn)


def flatten(x: Tensor, start_axis: int = 0) -> Tensor:
    """Row-major flatten of all axes from ``start_axis`` onward."""
    lead = x.shape[:start_axis]
    tail = int(np.prod(x.shape[start_axis:], dtype=np.int64)) if x.ndim > start_axis else 1
    return reshape(x, lead + (tail,))


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; input order is preserved (a first, then b)."""
    axis = axis if axis >= 0 else a.ndim + axis
    if a.ndim != b.ndim:
        raise ShapeError(f"concat: ranks {a.ndim} vs {b.ndim}")
    for i, (da, db) in enumerate(zip(a.shape, b.shape)):
        if i != axis and da != db:
            raise ShapeError(f"concat: non-concatenated axis {i} differs: {a.shape} vs {b.shape}")
    na = a.shape[axis]

    def backward_fn(g):
        ga, gb = np.split(g, [na], axis=axis)
        if a._needs_grad():
            a._accumulate(ga)
        if b._needs_grad():
            b._accumulate(gb)

    return _make_node(np.concatenate([a.data, b.data], axis=axis), (a, b), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        if x._needs_grad():
            x._accumulate(np.full(x.shape, float(g), dtype=x.data.dtype))

    return _make_node(np.asarray(np.sum(x.data)), (x,), backward_fn)


# ---------------------------------------------------------------------------
# dense / conv3d
# ---------------------------------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map y = x @ W + b for x of shape (n, in), W (in, out), b (out,)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense: x{x.shape} @ W{W.shape} inner dimensions disagree")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} vs output width ({W.shape[1]},)")
    y = x.data @ W.data
    if b is not None:
        y = y + b.data

    def backward_fn(g):
        if x._needs_grad():
            x._accumulate(g @ W.data.T)
        if W._needs_grad():
            W._accumulate(x.data.T @ g)
        if b is not None and b._needs_grad():
            b._accumulate(g.sum(axis=0))

    parents = (x, W) if b is None else (x, W, b)
    return _make_node(y, parents, backward_fn)


def _conv_patches(xp: np.ndarray, ksp: tuple[int, int, int],
                  stride: tuple[int, int, int]):
    """Strided view of all kernel-sized patches of a padded (N,C,D,H,W) array."""
    n, c, d, h, w = xp.shape
    kd, kh, kw = ksp
    sd, sh, sw = stride
    do = (d - kd) // sd + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    st = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, do, ho, wo, kd, kh, kw),
        strides=(st[0], st[1], st[2] * sd, st[3] * sh, st[4] * sw, st[2], st[3], st[4]),
    )
    return view, (do, ho, wo)


try:  # compiled direct kernel; the im2col path below is the portable fallback
    from numba import njit as _njit

    @_njit(cache=True, fastmath=False)
    def _corr3d_direct(xp, kern, sd, sh, sw, out):  # pragma: no cover - jitted
        # kernel-weight-hoisted order: the inner loop runs along the
        # contiguous W axis of both operands
        n, cin, _, _, _ = xp.shape
        cout, _, kd, kh, kw = kern.shape
        _, _, do, ho, wo = out.shape
        for b in range(n):
            for o in range(cout):
                for c in range(cin):
                    for a in range(kd):
                        for e in range(kh):
                            for f in range(kw):
                                kv = kern[o, c, a, e, f]
                                if kv == 0.0:
                                    continue
                                for zd in range(do):
                                    for zh in range(ho):
                                        xrow = xp[b, c, zd * sd + a, zh * sh + e]
                                        orow = out[b, o, zd, zh]
                                        for zw in range(wo):
                                            orow[zw] += kv * xrow[zw * sw + f]

    @_njit(cache=True, fastmath=False)
    def _conv3d_dx_direct(g, kern, sd, sh, sw, pd, ph, pw, gx):  # pragma: no cover
        n, cout, do, ho, wo = g.shape
        _, cin, kd, kh, kw = kern.shape
        _, _, d, h, w = gx.shape
        for b in range(n):
            for o in range(cout):
                for zd in range(do):
                    for zh in range(ho):
                        for zw in range(wo):
                            gv = g[b, o, zd, zh, zw]
                            for a in range(kd):
                                i = zd * sd + a - pd
                                if i < 0 or i >= d:
                                    continue
                                for e in range(kh):
                                    j = zh * sh + e - ph
                                    if j < 0 or j >= h:
                                        continue
                                    for f in range(kw):
                                        ll = zw * sw + f - pw
                                        if ll < 0 or ll >= w:
                                            continue
                                        for c in range(cin):
                                            gx[b, c, i, j, ll] += gv * kern[o, c, a, e, f]

except ImportError:  # pragma: no cover
    _corr3d_direct = None
    _conv3d_dx_direct = None


def _corr3d(xd: np.ndarray, kd_: np.ndarray, stride: tuple[int, int, int],
            padding: tuple[int, int, int]) -> np.ndarray:
    """Raw batched 3D cross-correlation.

    xd is (N, C, D, H, W), kd_ is (Co, C, kd, kh, kw). Uses the compiled
    direct kernel when available, else im2col + matmul with patches
    extracted channels-last so the copy runs over contiguous spans.
    """
    n, cin, d, h, w = xd.shape
    cout = kd_.shape[0]
    kd, kh, kw = kd_.shape[2:]
    pd, ph, pw = padding
    if padding != (0, 0, 0):
        xd = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    sd, sh, sw = stride
    # With few output channels the matmul degenerates and the im2col copy
    # dominates, so the looped kernel wins; otherwise BLAS wins.
    if _corr3d_direct is not None and cout <= 2:
        dp, hp, wp = xd.shape[2:]
        do = (dp - kd) // sd + 1
        ho = (hp - kh) // sh + 1
        wo = (wp - kw) // sw + 1
        out = np.zeros((n, cout, do, ho, wo), dtype=np.float64)
        _corr3d_direct(np.ascontiguousarray(xd, dtype=np.float64),
                       np.ascontiguousarray(kd_, dtype=np.float64),
                       sd, sh, sw, out)
        return out
    xcl = np.ascontiguousarray(xd.transpose(0, 2, 3, 4, 1))
    np_, dp, hp, wp, _ = xcl.shape
    do = (dp - kd) // sd + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    st = xcl.strides
    view = as_strided(
        xcl,
        shape=(n, do, ho, wo, kd, kh, kw, cin),
        strides=(st[0], st[1] * sd, st[2] * sh, st[3] * sw, st[1], st[2], st[3], st[4]),
    )
    cols = view.reshape(n * do * ho * wo, kd * kh * kw * cin)
    kmat = np.ascontiguousarray(kd_.transpose(2, 3, 4, 1, 0).reshape(-1, cout))
    y = cols @ kmat
    return y.reshape(n, do, ho, wo, cout).transpose(0, 4, 1, 2, 3)


def _dilate(g: np.ndarray, stride: tuple[int, int, int]) -> np.ndarray:
    """Insert stride-1 zeros between gradient elements along each spatial axis."""
    if stride == (1, 1, 1):
        return g
    n, c, do, ho, wo = g.shape
    sd, sh, sw = stride
    out = np.zeros((n, c, (do - 1) * sd + 1, (ho - 1) * sh + 1, (wo - 1) * sw + 1),
                   dtype=g.dtype)
    out[:, :, ::sd, ::sh, ::sw] = g
    return out


def conv3d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation.

    ``x`` is (C_in, D, H, W) or batched (N, C_in, D, H, W); ``kernels`` is
    (C_out, C_in, kd, kh, kw). Output spatial dims follow
    floor((D + 2*pad - kd) / stride) + 1. Backward passes are themselves
    expressed as correlations (dilated-gradient identities), so they share
    the matmul fast path.
    """
    stride = _as_triple(stride)
    padding = _as_triple(padding)
    if any(s < 1 for s in stride):
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"conv3d: input must be 4D or 5D, got shape {x.shape}")
    if kernels.ndim != 5:
        raise ShapeError(f"conv3d: kernels must be 5D, got shape {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, d, h, w = xd.shape
    cout, kcin, kd, kh, kw = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv3d: input channels {cin} vs kernel channels {kcin}")
    pd, ph, pw = padding
    if kd > d + 2 * pd or kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"conv3d: kernel ({kd},{kh},{kw}) larger than padded input "
            f"({d + 2 * pd},{h + 2 * ph},{w + 2 * pw})")

    y = _corr3d(xd, kernels.data, stride, padding)
    do, ho, wo = y.shape[2:]
    # slack between the padded extent and the last window's reach, per axis
    rests = (d + 2 * pd - kd - (do - 1) * stride[0],
             h + 2 * ph - kh - (ho - 1) * stride[1],
             w + 2 * pw - kw - (wo - 1) * stride[2])

    def backward_fn(g):
        if not batched:
            g = g[None]
        gd = None  # dilated gradient, built only by the fallback paths
        if kernels._needs_grad():
            # dW[o,c] = corr(x[n,c], dilated g[n,o]) with batch and channel
            # axes swapped on both operands
            xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) \
                if padding != (0, 0, 0) else xd
            gd = _dilate(g, stride) if gd is None else gd
            gk = _corr3d(xp.transpose(1, 0, 2, 3, 4),
                         gd.transpose(1, 0, 2, 3, 4), (1, 1, 1), (0, 0, 0))
            gk = gk.transpose(1, 0, 2, 3, 4)[:, :, :kd, :kh, :kw]
            kernels._accumulate(gk)
        if x._needs_grad():
            if _conv3d_dx_direct is not None:
                # scatter each gradient element through the kernel directly;
                # for strided convs this skips the dilation zeros entirely
                gx = np.zeros((n, cin, d, h, w), dtype=np.float64)
                _conv3d_dx_direct(np.ascontiguousarray(g, dtype=np.float64),
                                  np.ascontiguousarray(kernels.data, dtype=np.float64),
                                  stride[0], stride[1], stride[2],
                                  pd, ph, pw, gx)
            else:
                # dX = full correlation of the dilated gradient with the
                # spatially-flipped, channel-transposed kernel
                gd = _dilate(g, stride) if gd is None else gd
                kf = kernels.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
                full = _corr3d(gd, np.ascontiguousarray(kf), (1, 1, 1),
                               (kd - 1, kh - 1, kw - 1))
                if any(r > 0 for r in rests):
                    full = np.pad(full, ((0, 0), (0, 0), (0, rests[0]),
                                         (0, rests[1]), (0, rests[2])))
                gx = full[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
            x._accumulate(gx if batched else gx[0])

    out = y if batched else y[0]
    return _make_node(out, (x, kernels), backward_fn)


def upsample_nearest(x: Tensor, out_spatial: Sequence[int]) -> Tensor:
    """Nearest-neighbor upsampling of a (N, C, D, H, W) tensor to the given
    output spatial shape; source index for output i is floor(i * in / out)."""
    if x.ndim != 5:
        raise ShapeError(f"upsample_nearest: expected 5D input, got {x.shape}")
    do, ho, wo = (int(s) for s in out_spatial)
    n, c, d, h, w = x.shape
    idx_d = (np.arange(do) * d) // do
    idx_h = (np.arange(ho) * h) // ho
    idx_w = (np.arange(wo) * w) // wo
    y = x.data[:, :, idx_d[:, None, None], idx_h[None, :, None], idx_w[None, None, :]]

    def backward_fn(g):
        if x._needs_grad():
            gx = np.zeros(x.shape, dtype=x.data.dtype)
            np.add.at(gx, (slice(None), slice(None),
                           idx_d[:, None, None], idx_h[None, :, None], idx_w[None, None, :]), g)
            x._accumulate(gx)

    return _make_node(y, (x,), backward_fn)


# ---------------------------------------------------------------------------
# losses / sampling
# ---------------------------------------------------------------------------

def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward_fn(g):
        gd = (2.0 / n) * diff * float(g)
        if pred._needs_grad():
            pred._accumulate(gd)
        if target._needs_grad():
            target._accumulate(-gd)

    return _make_node(np.asarray(np.mean(diff * diff)), (pred, target), backward_fn)


def kld(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) = 0.5 * sum(mu^2 + exp(lv) - lv - 1).

    For 1D inputs this is the plain sum over dimensions; for batched (n, d)
    inputs the per-sample sums are averaged over the batch.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"kld: shapes {mu.shape} vs {logvar.shape}")
    ev = np.exp(logvar.data)
    per = 0.5 * (mu.data * mu.data + ev - logvar.data - 1.0)
    n_lead = int(np.prod(mu.shape[:-1], dtype=np.int64)) if mu.ndim > 1 else 1

    def backward_fn(g):
        c = float(g) / n_lead
        if mu._needs_grad():
            mu._accumulate(c * mu.data)
        if logvar._needs_grad():
            logvar._accumulate(c * 0.5 * (ev - 1.0))

    return _make_node(np.asarray(np.sum(per) / n_lead), (mu, logvar), backward_fn)


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """z = mu + exp(0.5 * logvar) * eps.

    ``eps`` is treated as a constant draw: gradients flow to mu and logvar,
    never to eps.
    """
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if mu.shape != logvar.shape or mu.shape != eps_arr.shape:
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {eps_arr.shape}")
    std = np.exp(0.5 * logvar.data)

    def backward_fn(g):
        if mu._needs_grad():
            mu._accumulate(g)
        if logvar._needs_grad():
            logvar._accumulate(g * 0.5 * std * eps_arr)

    return _make_node(mu.data + std * eps_arr, (mu, logvar), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss node.

    Visits each node exactly once in reverse topological order; after the
    sweep every requires_grad leaf reachable from ``loss`` has a populated
    ``.grad``. Deterministic: accumulation order is fixed by graph
    construction order.
    """
    if loss.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            if not node.requires_grad:
                node.grad = None  # interior grads are scratch space


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction over a named parameter dict.

    The step is deterministic given parameters, gradients, and state; a
    non-finite gradient aborts the step and names the offending parameter.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for parameter '{name}'")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def glorot_uniform(shape: Sequence[int], fan_in: int, fan_out: int,
                   rng: np.random.Generator) -> Tensor:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out)) from the given generator."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=tuple(shape)), requires_grad=True)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grads(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                            h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of the scalar f() wrt each leaf tensor.

    Independent of the analytic backward path: only re-evaluates f with
    perturbed leaf data.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    """Max elementwise relative error over entries where either side exceeds floor."""
    mask = (np.abs(analytic) > floor) | (np.abs(numeric) > floor)
    if not np.any(mask):
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / denom))
