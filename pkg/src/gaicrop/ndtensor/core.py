"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the cropping model needs are provided; every
differentiable op is checked against central finite differences in the
test suite. No broadcasting beyond what the ops state, no higher-order
derivatives, no GPU path.
"""

from __future__ import annotations

import numpy as np


class TensorError(ValueError):
    """Shape mismatch or invalid op usage."""


class Tensor:
    """N-d float64 array node on a reverse-mode tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        # out-of-place on the second contribution: the first may be a
        # view into a child's grad buffer, which must stay untouched
        if self.grad is None:
            self.grad = np.asarray(g)
        else:
            self.grad = self.grad + g


def _from_op(data, parents, backward_fn):
    """Result node; tracks gradients iff any parent does."""
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        _parents=parents if requires else (),
        _backward=backward_fn if requires else None,
    )


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every tracked parent."""
    if loss.data.shape != ():
        raise TensorError(f"backward needs a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    loss._accumulate(np.array(1.0))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# convolution

def _im2col_t(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Column matrix (c*k*k, n*ho*wo) built from k*k strided copies."""
    n, c = xp.shape[:2]
    col = np.empty((c, k, k, n, ho, wo), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            col[:, di, dj] = xp[
                :, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride
            ].transpose(1, 0, 2, 3)
    return col.reshape(c * k * k, n * ho * wo)


def _col2im_t(cols: np.ndarray, xp_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    grad_xp = np.zeros(xp_shape, dtype=np.float64)
    cols = cols.reshape(c, k, k, n, ho, wo)
    for di in range(k):
        for dj in range(k):
            grad_xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                cols[:, di, dj].transpose(1, 0, 2, 3)
            )
    return grad_xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with OIHW weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise TensorError("conv2d expects NCHW input and OIHW weight")
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise TensorError(f"channel mismatch: input {c}, weight {ci}")
    if kh != kw or kh % 2 == 0:
        raise TensorError(f"odd square kernels only, got {kh}x{kw}")
    if bias.data.shape != (o,):
        raise TensorError(f"bias must have shape ({o},), got {bias.data.shape}")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise TensorError("kernel larger than padded input")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        xp[:, :, padding:-padding, padding:-padding] = x.data
    else:
        xp = x.data
    col_t = _im2col_t(xp, k, stride, ho, wo)
    w_mat = weight.data.reshape(o, c * k * k)
    out_mat = w_mat @ col_t + bias.data[:, None]
    if n == 1:
        out = out_mat.reshape(1, o, ho, wo)
    else:
        out = out_mat.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward_fn(grad):
        if n == 1:
            gmat = grad.reshape(o, ho * wo)
        else:
            gmat = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        if weight.requires_grad:
            weight._accumulate((gmat @ col_t.T).reshape(o, c, k, k))
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1))
        if x.requires_grad:
            grad_xp = _col2im_t(w_mat.T @ gmat, xp.shape, k, stride, ho, wo)
            if padding:
                grad_xp = grad_xp[:, :, padding:-padding, padding:-padding]
            x._accumulate(grad_xp)

    return _from_op(out, (x, weight, bias), backward_fn)


def conv1x1_reduce(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Channel projection: conv2d with a 1x1 kernel, stride 1, no padding."""
    if weight.data.ndim != 4 or weight.data.shape[2:] != (1, 1):
        raise TensorError(f"expected 1x1 kernel, got weight shape {weight.data.shape}")
    return conv2d(x, weight, bias, stride=1, padding=0)


# ---------------------------------------------------------------------------
# pointwise / structural ops

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(grad * mask)

    return _from_op(np.where(mask, x.data, 0.0), (x,), backward_fn)


def mul_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant mask (no gradient to the mask)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.data.shape:
        raise TensorError(f"mask shape {mask.shape} != tensor shape {x.data.shape}")

    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(grad * mask)

    return _from_op(x.data * mask, (x,), backward_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (B, ...) flattened to (B, D); returns x @ weight.T + bias."""
    if x.data.ndim < 2:
        raise TensorError("fully_connected needs a batch dimension")
    b = x.data.shape[0]
    d = x.data.size // b
    out_dim, din = weight.data.shape
    if din != d:
        raise TensorError(f"weight expects {din} inputs, tensor flattens to {d}")
    if bias.data.shape != (out_dim,):
        raise TensorError(f"bias must have shape ({out_dim},)")
    flat = x.data.reshape(b, d)
    out = flat @ weight.data.T + bias.data

    def backward_fn(grad):
        if weight.requires_grad:
            weight._accumulate(grad.T @ flat)
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=0))
        if x.requires_grad:
            x._accumulate((grad @ weight.data).reshape(x.data.shape))

    return _from_op(out, (x, weight, bias), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 0 of CHW, axis 1 of NCHW)."""
    if a.data.ndim != b.data.ndim or a.data.ndim not in (3, 4):
        raise TensorError("concat_channels expects two CHW or two NCHW tensors")
    axis = a.data.ndim - 3
    if (a.data.shape[:axis] + a.data.shape[axis + 1:]
            != b.data.shape[:axis] + b.data.shape[axis + 1:]):
        raise TensorError(f"non-channel extents differ: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[axis]

    def backward_fn(grad):
        ga, gb = np.split(grad, [ca], axis=axis)
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return _from_op(np.concatenate([a.data, b.data], axis=axis), (a, b), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise TensorError(f"cannot reshape {x.data.shape} to {shape}")

    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(grad.reshape(x.data.shape))

    return _from_op(x.data.reshape(shape), (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(grad.reshape(x.data.shape))

    return _from_op(x.data.reshape(-1), (x,), backward_fn)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack equal-length 1-d tensors into a (B, D) matrix."""
    if not rows:
        raise TensorError("stack_rows needs at least one row")
    d = rows[0].data.shape
    if any(r.data.ndim != 1 or r.data.shape != d for r in rows):
        raise TensorError("stack_rows needs equal-length 1-d tensors")

    def backward_fn(grad):
        for i, r in enumerate(rows):
            if r.requires_grad:
                r._accumulate(grad[i])

    return _from_op(np.stack([r.data for r in rows]), tuple(rows), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    count = x.data.size

    def backward_fn(grad):
        if x.requires_grad:
            x._accumulate(np.full(x.data.shape, float(grad) / count))

    return _from_op(np.array(x.data.mean()), (x,), backward_fn)


# ---------------------------------------------------------------------------
# bilinear sampling

def _bilinear_parts(shape_hw, xs, ys):
    h, w = shape_hw
    if np.any(xs < 0) or np.any(xs > h - 1) or np.any(ys < 0) or np.any(ys > w - 1):
        raise TensorError("sample coordinates out of bounds; clamp before sampling")
    x0 = np.clip(np.floor(xs).astype(int), 0, max(h - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(w - 2, 0))
    tx = xs - x0
    ty = ys - y0
    weights = (
        ((1 - tx) * (1 - ty), x0, y0),
        ((1 - tx) * ty, x0, y0 + 1),
        (tx * (1 - ty), x0 + 1, y0),
        (tx * ty, x0 + 1, y0 + 1),
    )
    return weights


def grid_bilinear_sample(fmap: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Sample a CHW map at n (row, col) points; returns a (C, n) tensor."""
    if fmap.data.ndim != 3:
        raise TensorError("grid_bilinear_sample expects a CHW map")
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise TensorError("xs and ys must have equal length")
    h, w = fmap.data.shape[1:]
    if h < 2 or w < 2:
        raise TensorError("map must be at least 2x2 for bilinear sampling")
    parts = _bilinear_parts((h, w), xs, ys)
    out = np.zeros((fmap.data.shape[0], xs.size), dtype=np.float64)
    for wgt, xi, yi in parts:
        out += wgt * fmap.data[:, xi, yi]

    def backward_fn(grad):
        if fmap.requires_grad:
            g = np.zeros_like(fmap.data)
            for wgt, xi, yi in parts:
                np.add.at(g, (slice(None), xi, yi), wgt * grad)
            fmap._accumulate(g)

    return _from_op(out, (fmap,), backward_fn)


def _unique_rows(a: np.ndarray):
    """Lexicographically sorted unique rows plus the inverse index; same
    result as np.unique(a, axis=0, return_inverse=True) but without its
    per-call reshaping overhead."""
    order = np.lexsort(a.T[::-1])
    sa = a[order]
    new = np.empty(len(a), dtype=bool)
    new[0] = True
    np.any(sa[1:] != sa[:-1], axis=1, out=new[1:])
    inv = np.empty(len(a), dtype=np.intp)
    inv[order] = np.cumsum(new) - 1
    return sa[new], inv


def _outer_grid_forward(data: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Numpy forward of outer_grid_sample: (B, C, sx*sy) samples plus the
    intermediates the backward pass needs."""
    c, h, w = data.shape
    b, sx = xs.shape
    sy = ys.shape[1]
    ux, inv_x = _unique_rows(xs)
    uxf = ux.reshape(-1)
    x0 = np.clip(np.floor(uxf).astype(int), 0, max(h - 2, 0))
    tx = (uxf - x0)[None, :, None]
    # row pass: (c, Ux*sx, w), shared by all rows with equal xs
    rows = (1.0 - tx) * data.take(x0, axis=1) + tx * data.take(x0 + 1, axis=1)
    rowsf = rows.reshape(c, -1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(w - 2, 0))
    ty = ys - y0
    # per-crop column pass over its own row block, as flat gathers
    ridx = inv_x[:, None] * sx + np.arange(sx)  # (b, sx) row-block rows
    idx0 = (ridx[:, :, None] * w + y0[:, None, :]).reshape(-1)  # (b*sx*sy,)
    w1 = np.broadcast_to(ty[:, None, :], (b, sx, sy)).reshape(-1)
    w0 = 1.0 - w1
    g0 = rowsf.take(idx0, axis=1)
    g1 = rowsf.take(idx0 + 1, axis=1)
    np.multiply(g0, w0, out=g0)
    np.multiply(g1, w1, out=g1)
    g0 += g1
    out = np.ascontiguousarray(g0.reshape(c, b, sx * sy).transpose(1, 0, 2))
    return out, (rows, idx0, w0, w1, x0, tx)


def outer_grid_sample(fmap: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Sample a CHW map on B outer-product grids: row b uses the s x s
    grid xs[b] x ys[b]. Returns (B, C, s*s), rows in row-major order.

    Bilinear interpolation done separably (rows first, then columns),
    with the row pass shared across batch rows that have identical row
    coordinates. Equivalent to batched_bilinear_sample on the expanded
    grids up to floating-point association.
    """
    if fmap.data.ndim != 3:
        raise TensorError("outer_grid_sample expects a CHW map")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2 or xs.shape[0] != ys.shape[0]:
        raise TensorError("xs and ys must be (B, s) arrays")
    c, h, w = fmap.data.shape
    if h < 2 or w < 2:
        raise TensorError("map must be at least 2x2 for bilinear sampling")
    if (np.any(xs < 0) or np.any(xs > h - 1)
            or np.any(ys < 0) or np.any(ys > w - 1)):
        raise TensorError("sample coordinates out of bounds; clamp before sampling")
    out, (rows, idx0, w0, w1, x0, tx) = _outer_grid_forward(fmap.data, xs, ys)
    b, sx = xs.shape
    sy = ys.shape[1]
    rowsf = rows.reshape(c, -1)

    def backward_fn(grad):
        if fmap.requires_grad:
            gf = np.ascontiguousarray(grad.transpose(1, 0, 2)).reshape(c, -1)
            growsf = np.zeros_like(rowsf)
            np.add.at(growsf, (slice(None), idx0), w0 * gf)
            np.add.at(growsf, (slice(None), idx0 + 1), w1 * gf)
            grows = growsf.reshape(rows.shape)
            gmap = np.zeros_like(fmap.data)
            np.add.at(gmap, (slice(None), x0), (1.0 - tx) * grows)
            np.add.at(gmap, (slice(None), x0 + 1), tx * grows)
            fmap._accumulate(gmap)

    return _from_op(out, (fmap,), backward_fn)


def _shared_grid_sample(fmap: Tensor, xs: np.ndarray, ys: np.ndarray,
                        masks: np.ndarray) -> Tensor:
    c, h, w = fmap.data.shape
    n = xs.size
    b = masks.shape[0]
    parts = _bilinear_parts((h, w), xs, ys)
    flat_map = fmap.data.reshape(c, h * w)
    flat_masks = masks.reshape(b, h * w)
    out = np.zeros((b, c, n), dtype=np.float64)
    corners = []  # (flat indices, per-row effective weights) per corner
    for wgt, xi, yi in parts:
        idx = xi * w + yi
        eff = wgt * flat_masks[:, idx]  # (b, n)
        corners.append((idx, eff))
        out += eff[:, None, :] * flat_map.take(idx, axis=1)

    def backward_fn(grad):
        if fmap.requires_grad:
            g = np.zeros((c, h * w), dtype=np.float64)
            for idx, eff in corners:
                np.add.at(g, (slice(None), idx),
                          (eff[:, None, :] * grad).sum(axis=0))
            fmap._accumulate(g.reshape(c, h, w))

    return _from_op(out, (fmap,), backward_fn)


def batched_bilinear_sample(fmap: Tensor, xs: np.ndarray, ys: np.ndarray,
                            masks: np.ndarray | None = None) -> Tensor:
    """Sample a CHW map at (B, n) points per batch row; returns (B, C, n).

    With masks (a constant (B, H, W) array) each batch row samples the
    map multiplied elementwise by its own mask, without materializing B
    masked copies; gradients flow to the map only.

    1-d xs/ys with 3-d masks mean every row shares one sample grid and
    only the masks vary; the map is then gathered once per corner
    instead of once per row, which is much cheaper for large B.
    """
    if fmap.data.ndim != 3:
        raise TensorError("batched_bilinear_sample expects a CHW map")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise TensorError("xs and ys must have equal shapes")
    c, h, w = fmap.data.shape
    if h < 2 or w < 2:
        raise TensorError("map must be at least 2x2 for bilinear sampling")
    if xs.ndim == 1:
        if masks is None or masks.ndim != 3 or masks.shape[1:] != (h, w):
            raise TensorError("shared-grid mode needs (B, H, W) masks")
        return _shared_grid_sample(fmap, xs, ys, masks)
    if xs.ndim != 2:
        raise TensorError("xs and ys must be (B, n) or (n,) arrays")
    if masks is not None and masks.shape != (xs.shape[0], h, w):
        raise TensorError(f"masks must have shape ({xs.shape[0]}, {h}, {w})")
    parts = _bilinear_parts((h, w), xs, ys)
    b, n = xs.shape
    flat_map = fmap.data.reshape(c, h * w)
    if masks is not None:
        flat_masks = masks.reshape(-1)
        row_base = np.repeat(np.arange(b) * (h * w), n)
    out2 = np.zeros((c, b * n), dtype=np.float64)
    corners = []  # (flat indices, effective weights) per corner
    for wgt, xi, yi in parts:
        idx = (xi * w + yi).reshape(-1)
        eff = wgt.reshape(-1)
        if masks is not None:
            eff = eff * flat_masks.take(row_base + idx)
        corners.append((idx, eff))
        gathered = flat_map.take(idx, axis=1)
        np.multiply(gathered, eff, out=gathered)
        out2 += gathered
    out = np.ascontiguousarray(out2.reshape(c, b, n).transpose(1, 0, 2))

    def backward_fn(grad):
        if fmap.requires_grad:
            g = np.zeros((c, h * w), dtype=np.float64)
            gflat = np.ascontiguousarray(grad.transpose(1, 0, 2)).reshape(c, b * n)
            for idx, eff in corners:
                np.add.at(g, (slice(None), idx), eff * gflat)
            fmap._accumulate(g.reshape(c, h, w))

    return _from_op(out, (fmap,), backward_fn)


def bilinear_sample(fmap: Tensor, x: float, y: float) -> Tensor:
    """Sample a CHW map at one point; returns a length-C tensor."""
    sampled = grid_bilinear_sample(fmap, np.array([x]), np.array([y]))
    return flatten(sampled)


# ---------------------------------------------------------------------------
# loss

def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber loss over a batch of scores; quadratic within delta."""
    if pred.data.shape != target.data.shape:
        raise TensorError(
            f"pred shape {pred.data.shape} != target shape {target.data.shape}"
        )
    if delta <= 0:
        raise TensorError(f"delta must be positive, got {delta}")
    e = target.data - pred.data
    abs_e = np.abs(e)
    per_elt = np.where(abs_e <= delta, 0.5 * e * e, delta * abs_e - 0.5 * delta * delta)
    count = pred.data.size

    def backward_fn(grad):
        # d/d pred of the mean: clip(pred - target, -delta, delta) / count
        dpred = np.clip(-e, -delta, delta) / count
        if pred.requires_grad:
            pred._accumulate(float(grad) * dpred)
        if target.requires_grad:
            target._accumulate(float(grad) * -dpred)

    return _from_op(np.array(per_elt.mean()), (pred, target), backward_fn)
