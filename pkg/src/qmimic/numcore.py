"""Dense tensor ops with reverse-mode autodiff on top of numpy.

Values are plain ``np.ndarray`` (row-major, contiguous). ``float32`` is the
training dtype; ``float64`` inputs flow through unchanged and are used for
finite-difference gradient checks.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient stops being finite."""


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters: their ``grad``
    accumulates across ``backward`` calls until ``zero_grad`` is called.
    Interior nodes keep their gradients only for the duration of a backward
    pass.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name", "velocity")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: BackwardFn | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(DTYPE)
        if parents and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by {name or 'op'}")
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self.grad = np.zeros_like(value) if (requires_grad and not parents) else None
        self.velocity = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.value.dtype})"


def parameter(value, name: str | None = None) -> Node:
    return Node(np.array(value, order="C"), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def detach(x: Node) -> Node:
    return Node(x.value)


def custom_op(value, parents: Sequence[Node], backward_fn: BackwardFn, name: str | None = None) -> Node:
    """Build a node with a user-supplied backward rule.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent.
    """
    return Node(value, parents, backward_fn, name=name)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's ``grad``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"gradient shape {pg.shape} != value shape {parent.shape} in {node.name}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# --- elementwise / structural -------------------------------------------------


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Node(a.value + b.value, (a, b), lambda g: (g, g), name="add")


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return Node(a.value - b.value, (a, b), lambda g: (g, -g), name="sub")


def scale(a: Node, c: float) -> Node:
    c = a.value.dtype.type(c)
    return Node(a.value * c, (a,), lambda g: (g * c,), name="scale")


def total(a: Node) -> Node:
    """Sum of all elements, as a 0-d node."""
    return Node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), name="sum")


def sum_squares(a: Node) -> Node:
    return Node(np.sum(a.value * a.value), (a,), lambda g: (2 * g * a.value,), name="sum_squares")


def reshape(a: Node, shape: Sequence[int]) -> Node:
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), name="reshape")


def take_rows(a: Node, index: np.ndarray) -> Node:
    """Select rows ``a[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), bw, name="take_rows")


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,), name="relu")


# --- layers ---------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) -> rows of C*kh*kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Node, weight: Node, bias: Node, stride: int = 1, pad: int = 0) -> Node:
    """2-D cross-correlation, NCHW input and KCkk weight."""
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [N,C,H,W], got {x.shape}")
    if weight.value.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [K,C,kh,kw], got {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input channels C={c} but weight expects C={wc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias must have shape ({k},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad:
        raise ShapeError(f"conv2d: kernel height kh={kh} exceeds padded height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel width kw={kw} exceeds padded width {w + 2 * pad}")

    xv = x.value
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.value.reshape(k, -1)
    out = (cols @ wmat.T + bias.value).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xv.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            dx = np.ascontiguousarray(dx)
        return dx, dw, db

    return Node(np.ascontiguousarray(out), (x, weight, bias), bw, name="conv2d")


def linear(x: Node, weight: Node, bias: Node) -> Node:
    """``x @ weight.T + bias`` with x [N,D], weight [M,D], bias [M]."""
    if x.value.ndim != 2:
        raise ShapeError(f"linear: input must be 2-D [N,D], got {x.shape}")
    if weight.value.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input feature dim D={x.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.value @ weight.value.T + bias.value

    def bw(g):
        return g @ weight.value, g.T @ x.value, g.sum(axis=0)

    return Node(out, (x, weight, bias), bw, name="linear")


# --- losses ---------------------------------------------------------------------


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.value.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return Node(np.asarray(loss, dtype=logits.value.dtype), (logits,), bw, name="softmax_cross_entropy")


def smooth_l1(pred: Node, target) -> Node:
    """Mean elementwise Huber loss with transition at 1."""
    target = np.asarray(target, dtype=pred.value.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape} and target {target.shape} differ")
    d = pred.value - target
    ad = np.abs(d)
    small = ad < 1
    loss = np.where(small, 0.5 * d * d, ad - 0.5).mean() if d.size else np.zeros((), pred.value.dtype)

    def bw(g):
        return (np.where(small, d, np.sign(d)) * (g / max(d.size, 1)),)

    return Node(np.asarray(loss, dtype=pred.value.dtype), (pred,), bw, name="smooth_l1")


# --- optimisation ---------------------------------------------------------------


def sgd_step(params: Iterable[Node], lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """Momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr*v``; then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or repr(p)}")
    for p in params:
        if p.grad is None:
            continue
        step = p.grad + weight_decay * p.value if weight_decay else p.grad.copy()
        if p.velocity is None:
            p.velocity = np.zeros_like(p.value)
        p.velocity *= momentum
        p.velocity += step
        p.value -= lr * p.velocity
        p.grad[...] = 0



def clip_grad_norm(params: Iterable[Node], max_norm: float) -> float:
    """Rescale each parameter's gradient so its L2 norm is at most ``max_norm``; returns the largest norm seen."""
    largest = 0.0
    for p in params:
        if p.grad is None:
            continue
        norm = float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64))))
        largest = max(largest, norm)
        if norm > max_norm:
            p.grad *= max_norm / norm
    return largest
