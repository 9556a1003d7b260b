"""Primitive registry: shape rule, numpy forward and a graph-level VJP per kind.

Each VJP is written with graph primitives only, so gradient nodes can be
differentiated again.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels as K


class ShapeError(ValueError):
    """Raised at construction when a primitive's input shapes are incompatible."""


class UnsupportedPrimitive(KeyError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: Optional[int]  # None = variadic
    shape: Callable[[list, dict], tuple]
    forward: Callable[[list, dict], np.ndarray]
    vjp: Optional[Callable] = None  # None = not differentiable (zero gradient)


REGISTRY: dict[str, Primitive] = {}


def register(name, arity, shape, forward, vjp=None):
    REGISTRY[name] = Primitive(name, arity, shape, forward, vjp)


def lookup(kind: str) -> Primitive:
    key = kind.replace("-", "_")
    try:
        return REGISTRY[key]
    except KeyError:
        raise UnsupportedPrimitive(f"unsupported primitive kind {kind!r}") from None


def _fail(kind, shapes, why=""):
    msg = f"{kind}: incompatible input shapes {', '.join(str(tuple(s)) for s in shapes)}"
    raise ShapeError(msg + (f" ({why})" if why else ""))


# ---------------------------------------------------------------- shape rules

def _broadcast(kind):
    def rule(shapes, attrs):
        try:
            return tuple(np.broadcast_shapes(*shapes))
        except ValueError:
            _fail(kind, shapes)
    return rule


def _same(shapes, attrs):
    return tuple(shapes[0])


def _scalar(shapes, attrs):
    return ()


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _reduce_shape(shape, axes, keepdims):
    axes = _norm_axes(axes, len(shape))
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


# ---------------------------------------------------------------- helpers used by VJPs

def unbroadcast(g, grad, shape):
    if tuple(grad.shape) == tuple(shape):
        return grad
    return g.apply("sum_to", [grad], shape=tuple(shape))


def expand_reduced(g, grad, in_shape, axes, keepdims):
    """Broadcast a reduction's output gradient back to the input shape."""
    if not keepdims:
        grad = g.apply("reshape", [grad], shape=_reduce_shape(in_shape, axes, True))
    return g.apply("broadcast_to", [grad], shape=tuple(in_shape))


# ---------------------------------------------------------------- elementwise

register("add", 2, _broadcast("add"), lambda v, a: v[0] + v[1],
         lambda g, n, gr, need: [unbroadcast(g, gr, p.shape) for p in n.parents])

register("sub", 2, _broadcast("sub"), lambda v, a: v[0] - v[1],
         lambda g, n, gr, need: [unbroadcast(g, gr, n.parents[0].shape),
                                 unbroadcast(g, -gr, n.parents[1].shape)])


def _mul_vjp(g, n, gr, need):
    a, b = n.parents
    return [unbroadcast(g, gr * b, a.shape) if need[0] else None,
            unbroadcast(g, gr * a, b.shape) if need[1] else None]


register("mul", 2, _broadcast("mul"), lambda v, a: v[0] * v[1], _mul_vjp)


def _div_vjp(g, n, gr, need):
    a, b = n.parents
    ga = gr / b
    return [unbroadcast(g, ga, a.shape) if need[0] else None,
            unbroadcast(g, -(ga * n), b.shape) if need[1] else None]


register("div", 2, _broadcast("div"), lambda v, a: v[0] / v[1], _div_vjp)

register("scalar_mul", 1, _same, lambda v, a: v[0] * a["k"],
         lambda g, n, gr, need: [g.apply("scalar_mul", [gr], k=n.attrs["k"])])
register("add_scalar", 1, _same, lambda v, a: v[0] + a["k"],
         lambda g, n, gr, need: [gr])

register("relu_mask", 1, _same, lambda v, a: (v[0] > 0).astype(v[0].dtype))
register("sign", 1, _same, lambda v, a: np.sign(v[0]))
register("fill_like", 1, _same, lambda v, a: np.full(v[0].shape, a["value"], dtype=v[0].dtype))

register("relu", 1, _same, lambda v, a: np.maximum(v[0], 0),
         lambda g, n, gr, need: [gr * g.apply("relu_mask", [n.parents[0]])])
register("abs", 1, _same, lambda v, a: np.abs(v[0]),
         lambda g, n, gr, need: [gr * g.apply("sign", [n.parents[0]])])
register("square", 1, _same, lambda v, a: v[0] * v[0],
         lambda g, n, gr, need: [g.apply("scalar_mul", [gr * n.parents[0]], k=2.0)])
register("sqrt", 1, _same, lambda v, a: np.sqrt(v[0]),
         lambda g, n, gr, need: [gr / g.apply("scalar_mul", [n], k=2.0)])
register("log", 1, _same, lambda v, a: np.log(v[0]),
         lambda g, n, gr, need: [gr / n.parents[0]])
register("exp", 1, _same, lambda v, a: np.exp(v[0]),
         lambda g, n, gr, need: [gr * n])

# ---------------------------------------------------------------- reductions and reshapes


def _reduce_rule(shapes, attrs):
    return _reduce_shape(shapes[0], attrs.get("axes"), attrs.get("keepdims", False))


def _sum_fwd(v, a):
    return np.asarray(np.sum(v[0], axis=a.get("axes"), keepdims=a.get("keepdims", False)))


def _mean_fwd(v, a):
    return np.asarray(np.mean(v[0], axis=a.get("axes"), keepdims=a.get("keepdims", False)))


def _sum_vjp(g, n, gr, need):
    x = n.parents[0]
    return [expand_reduced(g, gr, x.shape, n.attrs.get("axes"), n.attrs.get("keepdims", False))]


def _mean_vjp(g, n, gr, need):
    x = n.parents[0]
    count = int(np.prod(x.shape)) // max(int(np.prod(n.shape)), 1)
    full = expand_reduced(g, gr, x.shape, n.attrs.get("axes"), n.attrs.get("keepdims", False))
    return [g.apply("scalar_mul", [full], k=1.0 / count)]


register("sum", 1, _reduce_rule, _sum_fwd, _sum_vjp)
register("mean", 1, _reduce_rule, _mean_fwd, _mean_vjp)


def _broadcast_to_rule(shapes, attrs):
    try:
        out = np.broadcast_shapes(shapes[0], attrs["shape"])
    except ValueError:
        _fail("broadcast_to", shapes, f"target {attrs['shape']}")
    if tuple(out) != tuple(attrs["shape"]):
        _fail("broadcast_to", shapes, f"target {attrs['shape']}")
    return tuple(attrs["shape"])


register("broadcast_to", 1, _broadcast_to_rule,
         lambda v, a: np.ascontiguousarray(np.broadcast_to(v[0], a["shape"])),
         lambda g, n, gr, need: [unbroadcast(g, gr, n.parents[0].shape)])


def _sum_to_rule(shapes, attrs):
    target = tuple(attrs["shape"])
    try:
        ok = tuple(np.broadcast_shapes(shapes[0], target)) == tuple(shapes[0])
    except ValueError:
        ok = False
    if not ok:
        _fail("sum_to", shapes, f"target {target}")
    return target


register("sum_to", 1, _sum_to_rule,
         lambda v, a: np.asarray(K.sum_to_shape(v[0], a["shape"])).reshape(a["shape"]),
         lambda g, n, gr, need: [g.apply("broadcast_to", [gr], shape=tuple(n.parents[0].shape))])


def _reshape_rule(shapes, attrs):
    src = tuple(shapes[0])
    target = list(attrs["shape"])
    if target.count(-1) > 1:
        _fail("reshape", shapes, "more than one -1")
    size = int(np.prod(src))
    if -1 in target:
        rest = int(np.prod([t for t in target if t != -1]))
        if rest == 0 or size % rest:
            _fail("reshape", shapes, f"target {tuple(target)}")
        target[target.index(-1)] = size // rest
    if int(np.prod(target)) != size:
        _fail("reshape", shapes, f"target {tuple(target)}")
    return tuple(target)


def _reshape_vjp(g, n, gr, need):
    return [g.apply("reshape", [gr], shape=tuple(n.parents[0].shape))]


register("reshape", 1, _reshape_rule, lambda v, a: v[0].reshape(a["shape"]), _reshape_vjp)


def _flatten_rule(shapes, attrs):
    s = shapes[0]
    if len(s) < 1:
        _fail("flatten", shapes, "need a batch axis")
    return (s[0], int(np.prod(s[1:])))


register("flatten", 1, _flatten_rule, lambda v, a: v[0].reshape(v[0].shape[0], -1), _reshape_vjp)


def _transpose_rule(shapes, attrs):
    axes = attrs.get("axes")
    s = shapes[0]
    if axes is None:
        return tuple(reversed(s))
    if sorted(axes) != list(range(len(s))):
        _fail("transpose", shapes, f"axes {axes}")
    return tuple(s[i] for i in axes)


def _transpose_vjp(g, n, gr, need):
    axes = n.attrs.get("axes")
    inv = None if axes is None else tuple(int(i) for i in np.argsort(axes))
    return [g.apply("transpose", [gr], axes=inv)]


register("transpose", 1, _transpose_rule,
         lambda v, a: np.ascontiguousarray(np.transpose(v[0], a.get("axes"))), _transpose_vjp)


def _matmul_rule(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        _fail("matmul", shapes)
    return (a[0], b[1])


def _matmul_vjp(g, n, gr, need):
    a, b = n.parents
    return [g.apply("matmul", [gr, g.apply("transpose", [b])]) if need[0] else None,
            g.apply("matmul", [g.apply("transpose", [a]), gr]) if need[1] else None]


register("matmul", 2, _matmul_rule, lambda v, a: v[0] @ v[1], _matmul_vjp)


def _concat_rule(shapes, attrs):
    axis = attrs.get("axis", 0)
    first = list(shapes[0])
    nd = len(first)
    ax = axis % nd
    total = 0
    for s in shapes:
        if len(s) != nd or any(s[i] != first[i] for i in range(nd) if i != ax):
            _fail("concat", shapes, f"axis {axis}")
        total += s[ax]
    first[ax] = total
    return tuple(first)


def _concat_vjp(g, n, gr, need):
    ax = n.attrs.get("axis", 0) % len(n.shape)
    out, start = [], 0
    for p, want in zip(n.parents, need):
        stop = start + p.shape[ax]
        if want:
            bounds = [(0, s) for s in n.shape]
            bounds[ax] = (start, stop)
            out.append(g.apply("slice", [gr], bounds=tuple(bounds)))
        else:
            out.append(None)
        start = stop
    return out


register("concat", None, _concat_rule,
         lambda v, a: np.concatenate(v, axis=a.get("axis", 0)), _concat_vjp)


def _slice_rule(shapes, attrs):
    s = shapes[0]
    bounds = attrs["bounds"]
    if len(bounds) != len(s) or any(not (0 <= lo < hi <= d) for (lo, hi), d in zip(bounds, s)):
        _fail("slice", shapes, f"bounds {bounds}")
    return tuple(hi - lo for lo, hi in bounds)


def _slice_fwd(v, a):
    return np.ascontiguousarray(v[0][tuple(slice(lo, hi) for lo, hi in a["bounds"])])


register("slice", 1, _slice_rule, _slice_fwd,
         lambda g, n, gr, need: [g.apply("pad", [gr], shape=tuple(n.parents[0].shape),
                                         starts=tuple(lo for lo, _ in n.attrs["bounds"]))])


def _pad_rule(shapes, attrs):
    s, target, starts = shapes[0], tuple(attrs["shape"]), tuple(attrs["starts"])
    if len(target) != len(s) or len(starts) != len(s) or any(
            st < 0 or st + d > t for st, d, t in zip(starts, s, target)):
        _fail("pad", shapes, f"target {target} starts {starts}")
    return target


def _pad_fwd(v, a):
    out = np.zeros(a["shape"], dtype=v[0].dtype)
    out[tuple(slice(st, st + d) for st, d in zip(a["starts"], v[0].shape))] = v[0]
    return out


register("pad", 1, _pad_rule, _pad_fwd,
         lambda g, n, gr, need: [g.apply("slice", [gr], bounds=tuple(
             (st, st + d) for st, d in zip(n.attrs["starts"], n.parents[0].shape)))])


def _crop_rule(shapes, attrs):
    s = shapes[0]
    y0, x0, h, w = attrs["y0"], attrs["x0"], attrs["h"], attrs["w"]
    if len(s) < 2 or y0 < 0 or x0 < 0 or h < 1 or w < 1 or y0 + h > s[-2] or x0 + w > s[-1]:
        _fail("crop", shapes, f"window y0={y0} x0={x0} h={h} w={w} out of bounds")
    return tuple(s[:-2]) + (h, w)


def _crop_fwd(v, a):
    return np.ascontiguousarray(v[0][..., a["y0"]:a["y0"] + a["h"], a["x0"]:a["x0"] + a["w"]])


def _crop_vjp(g, n, gr, need):
    src = n.parents[0].shape
    starts = (0,) * (len(src) - 2) + (n.attrs["y0"], n.attrs["x0"])
    return [g.apply("pad", [gr], shape=tuple(src), starts=starts)]


register("crop", 1, _crop_rule, _crop_fwd, _crop_vjp)

# ---------------------------------------------------------------- convolution


def _conv_attrs(a):
    return a.get("stride", 1), a.get("padding", 0)


def _conv2d_rule(shapes, attrs):
    x, w = shapes
    if len(x) != 4 or len(w) != 4 or x[1] != w[1]:
        _fail("conv2d", shapes)
    s, p = _conv_attrs(attrs)
    ho, wo = K.conv_out_hw(x[2], x[3], w[2], w[3], s, p)
    if ho < 1 or wo < 1:
        _fail("conv2d", shapes, "kernel larger than padded input")
    return (x[0], w[0], ho, wo)


def _conv2d_vjp(g, n, gr, need):
    x, w = n.parents
    s, p = _conv_attrs(n.attrs)
    return [g.apply("conv2d_input_grad", [gr, w], x_shape=tuple(x.shape), stride=s, padding=p) if need[0] else None,
            g.apply("conv2d_weight_grad", [x, gr], w_shape=tuple(w.shape), stride=s, padding=p) if need[1] else None]


register("conv2d", 2, _conv2d_rule, lambda v, a: K.conv2d(v[0], v[1], *_conv_attrs(a)), _conv2d_vjp)


def _cig_rule(shapes, attrs):
    gs, ws = shapes
    xs = tuple(attrs["x_shape"])
    if _conv2d_rule([xs, ws], attrs) != tuple(gs):
        _fail("conv2d_input_grad", shapes, f"x_shape {xs}")
    return xs


def _cig_vjp(g, n, gr, need):
    # out = conv^T(gout, w):  <h, out> = <conv(h, w), gout> = <wgrad(h, gout), w>
    gout, w = n.parents
    s, p = _conv_attrs(n.attrs)
    return [g.apply("conv2d", [gr, w], stride=s, padding=p) if need[0] else None,
            g.apply("conv2d_weight_grad", [gr, gout], w_shape=tuple(w.shape), stride=s, padding=p) if need[1] else None]


register("conv2d_input_grad", 2, _cig_rule,
         lambda v, a: K.conv2d_input_grad(v[0], v[1], tuple(a["x_shape"]), *_conv_attrs(a)), _cig_vjp)


def _cwg_rule(shapes, attrs):
    xs, gs = shapes
    ws = tuple(attrs["w_shape"])
    if _conv2d_rule([xs, ws], attrs) != tuple(gs):
        _fail("conv2d_weight_grad", shapes, f"w_shape {ws}")
    return ws


def _cwg_vjp(g, n, gr, need):
    # out = wgrad(x, gout):  <H, out> = <conv(x, H), gout> = <conv^T(gout, H), x>
    x, gout = n.parents
    s, p = _conv_attrs(n.attrs)
    return [g.apply("conv2d_input_grad", [gout, gr], x_shape=tuple(x.shape), stride=s, padding=p) if need[0] else None,
            g.apply("conv2d", [x, gr], stride=s, padding=p) if need[1] else None]


register("conv2d_weight_grad", 2, _cwg_rule,
         lambda v, a: K.conv2d_weight_grad(v[0], v[1], tuple(a["w_shape"]), *_conv_attrs(a)), _cwg_vjp)


def _pool_rule(shapes, attrs):
    s = shapes[0]
    if len(s) != 4 or s[2] < 2 or s[3] < 2:
        _fail("avgpool2x2", shapes)
    return (s[0], s[1], s[2] // 2, s[3] // 2)


register("avgpool2x2", 1, _pool_rule, lambda v, a: K.avgpool2x2(v[0]),
         lambda g, n, gr, need: [g.apply("avgpool2x2_adjoint", [gr], x_shape=tuple(n.parents[0].shape))])


def _pool_adj_rule(shapes, attrs):
    xs = tuple(attrs["x_shape"])
    if _pool_rule([xs], {}) != tuple(shapes[0]):
        _fail("avgpool2x2_adjoint", shapes, f"x_shape {xs}")
    return xs


register("avgpool2x2_adjoint", 1, _pool_adj_rule,
         lambda v, a: K.avgpool2x2_adjoint(v[0], tuple(a["x_shape"])),
         lambda g, n, gr, need: [g.apply("avgpool2x2", [gr])])

# ---------------------------------------------------------------- normalisation


def _inorm_rule(shapes, attrs):
    if len(shapes[0]) != 4:
        _fail("instance_norm", shapes, "expected [B,C,H,W]")
    return tuple(shapes[0])


def _rows(x):
    # [B, C, H, W] -> [B*C, H*W] view
    return x.reshape(x.shape[0] * x.shape[1], -1)


def _rowdot(u, v):
    # per-row inner product as a [B*C, 1] column, without a temporary product
    return np.einsum("ij,ij->i", _rows(u), _rows(v))[:, None]


def _inorm_stats(x, eps):
    shape = x.shape
    xr = _rows(x)
    xc = xr - xr.mean(axis=1, keepdims=True)
    s = np.sqrt(np.einsum("ij,ij->i", xc, xc)[:, None] / xr.shape[1] + eps)
    xc /= s
    return xc.reshape(shape), s.reshape(shape[:2] + (1, 1))


def _proj(v, y):
    # P_y(v) = v - mean(v) - y * mean(v * y), per (sample, channel)
    n = v.shape[2] * v.shape[3]
    vr, yr = _rows(v), _rows(y)
    out = vr - vr.mean(axis=1, keepdims=True)
    out -= yr * (_rowdot(v, y) / n)
    return out.reshape(v.shape)


def _inorm_fwd(v, a):
    return _inorm_stats(v[0], a.get("eps", 1e-5))[0]


def _inorm_vjp(g, n, gr, need):
    x = n.parents[0]
    eps = n.attrs.get("eps", 1e-5)
    s = g.apply("instance_norm_scale", [x], eps=eps)
    return [g.apply("instance_norm_vjp", [x, gr, n, s], eps=eps)]


# The fused backward kernels take the forward output y and the per-channel scale s
# as extra inputs so they are not recomputed. Those two inputs are functions of x
# and receive no gradient of their own; the x-gradient below is the total one.

def _inorm_vjp_fwd(v, a):
    # d instance_norm(x) applied to cotangent g: P_y(g) / s
    _, gr, y, s = v
    return _proj(gr, y) / s


def _inorm_vjp_vjp(g, n, gr, need):
    x, cot, y, s = n.parents
    eps = n.attrs.get("eps", 1e-5)
    return [g.apply("instance_norm_vjp2", [x, cot, gr, y, s], eps=eps) if need[0] else None,
            g.apply("instance_norm_vjp", [x, gr, y, s], eps=eps) if need[1] else None,
            None, None]


def _inorm_vjp2_fwd(v, a):
    # gradient wrt x of <h, instance_norm_vjp(x, g)>
    x, gr, h, y, s = v
    n = x.shape[2] * x.shape[3]
    u = _proj(gr, y)
    q = _rows(h) * (_rowdot(gr, y) / n)
    q += _rows(gr) * (_rowdot(h, y) / n)
    hu = _rowdot(h, u) / n
    out = _rows(_proj(q.reshape(x.shape), y))
    out += _rows(y) * hu
    out /= -_rows(s * s)
    return out.reshape(x.shape)


def _inorm_composite_vjp(g, x, cot, eps):
    """instance_norm_vjp(x, cot) written with elementary nodes (used for third order)."""
    sp = dict(axes=(2, 3), keepdims=True)
    xc = x - g.apply("mean", [x], **sp)
    s = g.apply("sqrt", [g.apply("add_scalar", [g.apply("mean", [g.apply("square", [xc])], **sp)], k=eps)])
    y = xc / s
    inner = cot - g.apply("mean", [cot], **sp) - y * g.apply("mean", [cot * y], **sp)
    return inner / s


def _inorm_vjp2_vjp(g, n, gr, need):
    # Fresh identity proxies keep the derivatives partial: the parents may depend on
    # each other elsewhere in the graph, the proxies do not.
    xp, cp, hp = (g.apply("reshape", [p], shape=p.shape) for p in n.parents[:3])
    eps = n.attrs.get("eps", 1e-5)
    inner = g.apply("sum", [_inorm_composite_vjp(g, xp, cp, eps) * hp])
    (gx,) = g.derive(inner, [xp])
    grads = g.derive(g.apply("sum", [gx * gr]), [xp, cp, hp])
    return [gi if want else None for gi, want in zip(grads, need[:3])] + [None, None]


def _inorm_vjp_rule(shapes, attrs):
    x = tuple(shapes[0])
    n_full = len(shapes) - 2
    if len(x) != 4 or any(tuple(s) != x for s in shapes[:n_full]) or tuple(shapes[-1]) != x[:2] + (1, 1):
        _fail("instance_norm_vjp", shapes, "expected [B,C,H,W] inputs plus a [B,C,1,1] scale")
    return x


def _inorm_scale_rule(shapes, attrs):
    _inorm_rule(shapes, attrs)
    return tuple(shapes[0][:2]) + (1, 1)


register("instance_norm_scale", 1, _inorm_scale_rule,
         lambda v, a: _inorm_stats(v[0], a.get("eps", 1e-5))[1])
register("instance_norm_vjp", 4, _inorm_vjp_rule, _inorm_vjp_fwd, _inorm_vjp_vjp)
register("instance_norm_vjp2", 5, _inorm_vjp_rule, _inorm_vjp2_fwd, _inorm_vjp2_vjp)


register("instance_norm", 1, _inorm_rule, _inorm_fwd, _inorm_vjp)

# ---------------------------------------------------------------- losses


def _softmax_vjp(g, n, gr, need):
    dot = g.apply("sum", [gr * n], axes=(-1,), keepdims=True)
    return [n * (gr - dot)]


register("softmax", 1, _same, lambda v, a: K.softmax(v[0], -1), _softmax_vjp)


def _xent_rule(shapes, attrs):
    s = shapes[0]
    labels = np.asarray(attrs["labels"])
    if len(s) != 2 or labels.shape != (s[0],) or (labels.size and (labels.min() < 0 or labels.max() >= s[1])):
        _fail("softmax_cross_entropy", shapes, f"labels shape {labels.shape}")
    return ()


def _xent_fwd(v, a):
    z = v[0]
    labels = np.asarray(a["labels"])
    lse = K.logsumexp(z, -1)
    return np.asarray(np.mean(lse - z[np.arange(z.shape[0]), labels]))


def _xent_grad_fwd(v, a):
    z = v[0]
    p = K.softmax(z, -1)
    p[np.arange(z.shape[0]), np.asarray(a["labels"])] -= 1.0
    return p / z.shape[0]


def _xent_grad_vjp(g, n, gr, need):
    # out = (softmax(z) - onehot) / B, so only the softmax term depends on z
    z = n.parents[0]
    p = g.apply("softmax", [z])
    dot = g.apply("sum", [gr * p], axes=(-1,), keepdims=True)
    return [g.apply("scalar_mul", [p * (gr - dot)], k=1.0 / z.shape[0])]


def _xent_grad_rule(shapes, attrs):
    _xent_rule(shapes, attrs)
    return tuple(shapes[0])


register("xent_grad", 1, _xent_grad_rule, _xent_grad_fwd, _xent_grad_vjp)


def _xent_vjp(g, n, gr, need):
    z = n.parents[0]
    b, c = z.shape
    scale = g.apply("broadcast_to", [g.apply("reshape", [gr], shape=(1, 1))], shape=(b, c))
    return [g.apply("xent_grad", [z], labels=n.attrs["labels"]) * scale]


register("softmax_cross_entropy", 1, _xent_rule, _xent_fwd, _xent_vjp)


def _mse_rule(shapes, attrs):
    if tuple(shapes[0]) != tuple(shapes[1]):
        _fail("mse", shapes)
    return ()


def _mse_vjp(g, n, gr, need):
    a, b = n.parents
    size = int(np.prod(a.shape))
    d = a - b
    full = g.apply("broadcast_to", [g.apply("reshape", [gr], shape=(1,) * len(a.shape))], shape=tuple(a.shape))
    ga = g.apply("scalar_mul", [d * full], k=2.0 / size)
    return [ga if need[0] else None, -ga if need[1] else None]


register("mse", 2, _mse_rule, lambda v, a: np.asarray(np.mean((v[0] - v[1]) ** 2)), _mse_vjp)


def _cos_rule(shapes, attrs):
    try:
        out = np.broadcast_shapes(*shapes)
    except ValueError:
        _fail("cosine_similarity", shapes)
    if len(out) < 1:
        _fail("cosine_similarity", shapes, "need a feature axis")
    return tuple(out[:-1])


def _cos_fwd(v, a):
    u, w = v
    nu = np.sqrt(np.sum(u * u, axis=-1))
    nw = np.sqrt(np.sum(w * w, axis=-1))
    if np.any(nu == 0) or np.any(nw == 0):
        raise FloatingPointError("cosine_similarity: zero-norm vector, cosine undefined")
    return np.asarray(np.sum(u * w, axis=-1) / (nu * nw))


def _cos_vjp(g, n, gr, need):
    u, v = n.parents
    full = tuple(np.broadcast_shapes(u.shape, v.shape))
    keep = dict(axes=(-1,), keepdims=True)
    nu = g.apply("sqrt", [g.apply("sum", [g.apply("square", [u])], **keep)])
    nv = g.apply("sqrt", [g.apply("sum", [g.apply("square", [v])], **keep)])
    cos = g.apply("reshape", [n], shape=full[:-1] + (1,))
    gk = g.apply("reshape", [gr], shape=full[:-1] + (1,))
    prod = nu * nv
    out = []
    if need[0]:
        du = gk * (v / prod - cos * u / g.apply("square", [nu]))
        out.append(unbroadcast(g, du, u.shape))
    else:
        out.append(None)
    if need[1]:
        dv = gk * (u / prod - cos * v / g.apply("square", [nv]))
        out.append(unbroadcast(g, dv, v.shape))
    else:
        out.append(None)
    return out


register("cosine_similarity", 2, _cos_rule, _cos_fwd, _cos_vjp)

# ---------------------------------------------------------------- resampling


def _resample_rule(shapes, attrs):
    s = shapes[0]
    mh, mw = attrs["mh"], attrs["mw"]
    if len(s) < 2 or mh.shape[1] != s[-2] or mw.shape[1] != s[-1]:
        _fail("resample", shapes, f"matrices {mh.shape} {mw.shape}")
    return tuple(s[:-2]) + (mh.shape[0], mw.shape[0])


register("resample", 1, _resample_rule, lambda v, a: K.separable_apply(v[0], a["mh"], a["mw"]),
         lambda g, n, gr, need: [g.apply("resample", [gr], mh=n.attrs["mh"].T.copy(), mw=n.attrs["mw"].T.copy())])


def _resize_rule(shapes, attrs):
    s = shapes[0]
    h, w = attrs["size"]
    if len(s) < 2 or h < 1 or w < 1:
        _fail("bilinear_resize", shapes, f"size {attrs['size']}")
    return tuple(s[:-2]) + (h, w)


def _resize_mats(n_shape_in, size):
    return K.bilinear_matrix(size[0], n_shape_in[-2]), K.bilinear_matrix(size[1], n_shape_in[-1])


def _resize_fwd(v, a):
    mh, mw = _resize_mats(v[0].shape, a["size"])
    return K.separable_apply(v[0], mh, mw)


def _resize_vjp(g, n, gr, need):
    mh, mw = _resize_mats(n.parents[0].shape, n.attrs["size"])
    return [g.apply("resample", [gr], mh=mh.T.copy(), mw=mw.T.copy())]


register("bilinear_resize", 1, _resize_rule, _resize_fwd, _resize_vjp)


PUBLIC_KINDS = (
    "add", "sub", "mul", "scalar_mul", "matmul", "conv2d", "relu", "avgpool2x2", "instance_norm",
    "flatten", "mean", "abs", "square", "cosine_similarity", "softmax_cross_entropy", "mse", "crop",
    "bilinear_resize", "log", "exp", "concat",
)
