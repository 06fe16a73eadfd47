"""Small symbolic reverse-mode differentiation engine over numpy arrays.

Expressions are graphs of :class:`Expr` nodes. :func:`gradients` walks a
graph in reverse and returns the adjoints as *new graphs*, so a gradient can
be differentiated again (forces from energies, then parameter gradients of a
loss built from those forces, or Hessians for Newton).

Shapes are not tracked symbolically. Reductions back to an operand's shape
happen at run time through ``sum_like``/``broadcast_like`` nodes, so one
compiled :class:`Program` serves any batch size.

Polynomial features get a dedicated pair of ops: ``monomials`` evaluates
all monomials of a fixed exponent table column-wise, and its adjoint is a
sparse ``bilinear`` contraction against the monomials of the lowered table.
Both ops are closed under differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import sparse

SWISH_MAX_ORDER = 4


class Expr:
    __slots__ = ("op", "args", "attrs", "name", "cache", "__weakref__")

    def __init__(self, op: str, args: Sequence["Expr"] = (), attrs=None, name: Optional[str] = None):
        self.op = op
        self.args = tuple(args)
        self.attrs = attrs
        self.name = name
        self.cache = {}

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Expr({self.op}{label}, {len(self.args)} args)"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_expr(other)))

    def __rsub__(self, other):
        return add(as_expr(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------- leaves


def input(name: str) -> Expr:  # noqa: A001 - mirrors the node kind
    return Expr("input", name=name)


def param(name: str) -> Expr:
    return Expr("param", name=name)


def const(value) -> Expr:
    return Expr("const", attrs=np.asarray(value, dtype=float))


def as_expr(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


def _is_const(e: Expr, value=None) -> bool:
    if e.op != "const":
        return False
    if value is None:
        return True
    return e.attrs.ndim == 0 and float(e.attrs) == value


# ------------------------------------------------------------ constructors


def add(a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Expr("add", (a, b))


def mul(a, b) -> Expr:
    a, b = as_expr(a), as_expr(b)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Expr("mul", (a, b))


def neg(a) -> Expr:
    return mul(const(-1.0), a)


def div(a, b, safe: bool = False) -> Expr:
    """a / b; with ``safe`` the result is 0 wherever b == 0."""
    return Expr("div", (as_expr(a), as_expr(b)), attrs=bool(safe))


def matmul(a, b) -> Expr:
    return Expr("matmul", (as_expr(a), as_expr(b)))


def transpose(a) -> Expr:
    return Expr("transpose", (as_expr(a),))


def reshape(a, shape) -> Expr:
    return Expr("reshape", (as_expr(a),), attrs=tuple(shape))


def reshape_like(a, ref) -> Expr:
    return Expr("reshape_like", (as_expr(a), ref))


def sum(a) -> Expr:  # noqa: A001
    return Expr("sum", (as_expr(a),))


def sum_axis(a, axis: int) -> Expr:
    """Sum along one axis, keeping it as a length-1 dimension."""
    return Expr("sum_axis", (as_expr(a),), attrs=int(axis))


def sum_like(g, ref) -> Expr:
    """Reduce a broadcast result g back to the run-time shape of ref."""
    return Expr("sum_like", (as_expr(g), ref))


def broadcast_like(g, ref) -> Expr:
    return Expr("broadcast_like", (as_expr(g), ref))


def zeros_like(ref) -> Expr:
    return Expr("zeros_like", (ref,))


def swish(a, order: int = 0) -> Expr:
    """x*sigmoid(x) (order 0) or its order-th derivative, elementwise."""
    if not 0 <= order <= SWISH_MAX_ORDER:
        raise ValueError(f"swish derivative order {order} not available")
    return Expr("swish", (as_expr(a),), attrs=int(order))


def power(a, p: float) -> Expr:
    p = float(p)
    if p == 1.0:
        return as_expr(a)
    return Expr("power", (as_expr(a),), attrs=p)


def relu(a) -> Expr:
    return Expr("relu", (as_expr(a),))


def step(a) -> Expr:
    """Heaviside step (x > 0); zero derivative almost everywhere."""
    return Expr("step", (as_expr(a),))


def norm(a) -> Expr:
    """Frobenius norm with the subgradient 0 at the origin."""
    return Expr("norm", (as_expr(a),))


def monomials(X, exponents) -> Expr:
    """Row k, column b: prod_j X[j, b] ** E[k, j] for an int table E (m x r)."""
    E = np.atleast_2d(np.asarray(exponents, dtype=np.int64))
    if np.any(E < 0):
        raise ValueError("negative exponent in monomial table")
    return Expr("monomials", (as_expr(X),), attrs=_MonomialTable(E))


def bilinear(g, Z, table: "_Bilinear") -> Expr:
    """out[j, b] = sum over nonzeros (j, k, l, w) of w * g[k, b] * Z[l, b]."""
    return Expr("bilinear", (as_expr(g), as_expr(Z)), attrs=table)


# ------------------------------------------------------- op helper tables


class _MonomialTable:
    def __init__(self, E: np.ndarray):
        self.E = E
        self.groups = []  # (j, p, rows) with E[rows, j] == p
        for j in range(E.shape[1]):
            for p in np.unique(E[:, j]):
                if p > 0:
                    self.groups.append((j, int(p), np.flatnonzero(E[:, j] == p)))
        self._lowered = None

    def lowered(self):
        """Exponent table of all first partials and the contraction mapping to it."""
        if self._lowered is None:
            E = self.E
            m, r = E.shape
            rows, lookup = [], {}
            jj, kk, ll, ww = [], [], [], []
            for k in range(m):
                for j in range(r):
                    e = E[k, j]
                    if e == 0:
                        continue
                    low = E[k].copy()
                    low[j] -= 1
                    key = low.tobytes()
                    if key not in lookup:
                        lookup[key] = len(rows)
                        rows.append(low)
                    jj.append(j)
                    kk.append(k)
                    ll.append(lookup[key])
                    ww.append(float(e))
            E_low = np.array(rows, dtype=np.int64).reshape(-1, r)
            table = _Bilinear((r, m, len(rows)), np.array(jj), np.array(kk), np.array(ll), np.array(ww))
            self._lowered = (E_low, table)
        return self._lowered

    def evaluate(self, X):
        X = np.asarray(X, dtype=float)
        out = np.ones((self.E.shape[0],) + X.shape[1:])
        for j, p, rows in self.groups:
            out[rows] *= X[j] ** p
        return out


class _Bilinear:
    def __init__(self, dims, j, k, l, w):
        self.dims = tuple(dims)  # (J, K, L)
        self.j, self.k, self.l, self.w = j, k, l, w
        self.scatter = sparse.csr_matrix((w, (j, np.arange(len(j)))), shape=(dims[0], len(j)))
        self._perm = {}

    def permuted(self, which: str) -> "_Bilinear":
        """Same tensor with the output index swapped with operand ``which``."""
        if which not in self._perm:
            J, K, L = self.dims
            if which == "g":  # out over k, operands (h over j, Z over l)
                t = _Bilinear((K, J, L), self.k, self.j, self.l, self.w)
            else:  # out over l, operands (h over j, g over k)
                t = _Bilinear((L, J, K), self.l, self.j, self.k, self.w)
            self._perm[which] = t
        return self._perm[which]

    def evaluate(self, g, Z):
        prod = g[self.k] * Z[self.l]
        return np.asarray(self.scatter @ prod)


# ------------------------------------------------------------ forward ops


def _sigmoid(x):
    # branch split at 0 through exp(-|x|), so exp never overflows
    e = np.exp(-np.abs(x))
    inv = 1.0 / (1.0 + e)
    return np.where(x >= 0, inv, e * inv)


def swish_value(x, order: int = 0):
    x = np.asarray(x, dtype=float)
    s = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    if order == 0:
        return x * s
    p = s * (1.0 - s)
    u = 1.0 - 2.0 * s
    if order == 1:
        return s * (1.0 + x * (1.0 - s))
    if order == 2:
        return p * (2.0 + x * u)
    if order == 3:
        return p * (3.0 * u + x * (u * u - 2.0 * p))
    if order == 4:
        # d/dx of p*(3u + x(u^2 - 2p)) with p' = p u, u' = -2p
        inner = 3.0 * u + x * (u * u - 2.0 * p)
        d_inner = 3.0 * (-2.0 * p) + (u * u - 2.0 * p) + x * (-4.0 * u * p - 2.0 * p * u)
        return p * u * inner + p * d_inner
    raise ValueError(f"swish derivative order {order} not available")


def _reduce_to(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _safe_div(a, b):
    b = np.asarray(b, dtype=float)
    a = np.asarray(a, dtype=float)
    out = np.zeros(np.broadcast(a, b).shape)
    nz = np.broadcast_to(b != 0, out.shape)
    np.divide(np.broadcast_to(a, out.shape), np.broadcast_to(b, out.shape), out=out, where=nz)
    return out


_FORWARD: Dict[str, Callable] = {
    "add": lambda n, a, b: a + b,
    "mul": lambda n, a, b: a * b,
    "div": lambda n, a, b: _safe_div(a, b) if n.attrs else a / b,
    "matmul": lambda n, a, b: a @ b,
    "transpose": lambda n, a: np.swapaxes(a, -1, -2) if np.ndim(a) >= 2 else a,
    "reshape": lambda n, a: np.reshape(a, n.attrs),
    "reshape_like": lambda n, a, ref: np.reshape(a, np.shape(ref)),
    "sum": lambda n, a: np.asarray(np.sum(a)),
    "sum_axis": lambda n, a: np.sum(a, axis=n.attrs, keepdims=True),
    "sum_like": lambda n, g, ref: _reduce_to(g, np.shape(ref)),
    "broadcast_like": lambda n, g, ref: np.broadcast_to(g, np.shape(ref)),
    "zeros_like": lambda n, ref: np.zeros(np.shape(ref)),
    "swish": lambda n, a: swish_value(a, n.attrs),
    "power": lambda n, a: np.power(a, n.attrs),
    "relu": lambda n, a: np.maximum(a, 0.0),
    "step": lambda n, a: (np.asarray(a) > 0).astype(float),
    "norm": lambda n, a: np.asarray(np.sqrt(np.sum(np.square(a)))),
    "monomials": lambda n, X: n.attrs.evaluate(X),
    "bilinear": lambda n, g, Z: n.attrs.evaluate(g, Z),
}


# ---------------------------------------------------------- reverse rules


def _vjp(node: Expr, g: Expr):
    """Yield (argument position, adjoint contribution) for one node."""
    op, args = node.op, node.args
    if op == "add":
        a, b = args
        yield 0, sum_like(g, a)
        yield 1, sum_like(g, b)
    elif op == "mul":
        a, b = args
        if not _is_const(a):
            yield 0, sum_like(mul(g, b), a)
        if not _is_const(b):
            yield 1, sum_like(mul(g, a), b)
    elif op == "div":
        a, b = args
        safe = node.attrs
        yield 0, sum_like(div(g, b, safe), a)
        if not _is_const(b):
            yield 1, sum_like(neg(mul(g, div(node, b, safe))), b)
    elif op == "matmul":
        a, b = args
        if not _is_const(a):
            yield 0, matmul(g, transpose(b))
        if not _is_const(b):
            yield 1, matmul(transpose(a), g)
    elif op == "transpose":
        yield 0, transpose(g)
    elif op in ("reshape", "reshape_like"):
        yield 0, reshape_like(g, args[0])
    elif op in ("sum", "sum_axis"):
        yield 0, broadcast_like(g, args[0])
    elif op == "sum_like":
        yield 0, broadcast_like(g, args[0])
    elif op == "broadcast_like":
        yield 0, sum_like(g, args[0])
    elif op == "swish":
        yield 0, mul(g, swish(args[0], node.attrs + 1))
    elif op == "power":
        p = node.attrs
        d = const(0.0) if p == 0.0 else mul(const(p), power(args[0], p - 1.0))
        if p != 0.0:
            yield 0, mul(g, d)
    elif op == "relu":
        yield 0, mul(g, step(args[0]))
    elif op == "norm":
        yield 0, mul(g, div(args[0], node, safe=True))
    elif op == "monomials":
        X = args[0]
        E_low, table = node.attrs.lowered()
        if E_low.shape[0] == 0:
            return
        low = node.cache.get("low")
        if low is None:
            low = node.cache["low"] = monomials(X, E_low)
        yield 0, sum_like(bilinear(g, low, table), X)
    elif op == "bilinear":
        a, Z = args
        t = node.attrs
        yield 0, sum_like(bilinear(g, Z, t.permuted("g")), a)
        yield 1, sum_like(bilinear(g, a, t.permuted("Z")), Z)
    elif op in ("step", "zeros_like", "input", "param", "const"):
        return
    else:  # pragma: no cover - guarded by constructors
        raise NotImplementedError(op)


def topological_order(outputs: Iterable[Expr]) -> List[Expr]:
    order, seen = [], set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for a in reversed(node.args):
                if id(a) not in seen:
                    stack.append((a, False))
    return order


def gradients(y: Expr, wrt: Sequence[Expr], seed: Optional[Expr] = None) -> List[Expr]:
    """Adjoint graphs of scalar y with respect to each node in ``wrt``.

    A node that y does not depend on gets ``zeros_like(node)``. Contributions
    are accumulated in reverse topological order, which fixes the summation
    order and keeps evaluation bit-reproducible.
    """
    order = topological_order([y])
    position = {id(n): i for i, n in enumerate(order)}
    adj: Dict[int, Expr] = {id(y): const(1.0) if seed is None else seed}
    targets = {id(w) for w in wrt}
    # nodes that reach a target; pruning keeps dead adjoint branches out of the graph
    live = set()
    for n in order:
        if id(n) in targets or any(id(a) in live for a in n.args):
            live.add(id(n))
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None or not node.args:
            continue
        for i, contrib in _vjp(node, g):
            a = node.args[i]
            if id(a) not in live:
                continue
            prev = adj.get(id(a))
            adj[id(a)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        if id(w) in position and id(w) in adj:
            out.append(adj[id(w)])
        else:
            out.append(zeros_like(w))
    return out


def grad_input(f: Expr, x: Expr) -> Expr:
    """Gradient of a scalar graph with respect to an input; itself a graph."""
    return gradients(f, [x])[0]


def grad_params(g: Expr, params: Sequence[Expr]) -> List[Expr]:
    return gradients(g, list(params))


# shared so that several Hessians in one program feed the same leaf
EYE = Expr("input", name="__eye__")


def hessian_batched(f_of: Callable[[Expr], Expr], x_rep: Expr) -> tuple:
    """Gradient and Hessian of a columnwise scalar function at one point.

    ``x_rep`` is fed r identical copies of the point as an r x r matrix;
    ``f_of(X)`` must return a 1 x B row of per-column values. Column b of
    the second result is the gradient of df/dx_b, i.e. the (symmetric)
    Hessian. Every column of the first result is the gradient.
    """
    G = grad_input(sum(f_of(x_rep)), x_rep)
    eye = EYE
    H = grad_input(sum(mul(G, eye)), x_rep)
    return G, H


# ----------------------------------------------------------------- programs


class Program:
    """Compiled evaluation plan for a fixed list of output graphs."""

    def __init__(self, outputs: Sequence[Expr]):
        self.outputs = list(outputs)
        self.order = topological_order(self.outputs)
        index = {id(n): i for i, n in enumerate(self.order)}
        self._args = [tuple(index[id(a)] for a in n.args) for n in self.order]
        self._out = [index[id(o)] for o in self.outputs]
        self.leaves = {}
        for n in self.order:
            if n.op in ("input", "param"):
                if n.name in self.leaves and self.leaves[n.name] is not n:
                    raise ValueError(f"two distinct leaves named {n.name!r}")
                self.leaves[n.name] = n

    def __len__(self):
        return len(self.order)

    def __call__(self, feed: Dict[str, np.ndarray]) -> List[np.ndarray]:
        vals: List = [None] * len(self.order)
        for i, node in enumerate(self.order):
            op = node.op
            if op in ("input", "param"):
                try:
                    vals[i] = feed[node.name]
                except KeyError:
                    if node.name == "__eye__":
                        raise KeyError("hessian_batched programs need feed['__eye__']") from None
                    raise KeyError(f"no value fed for {op} {node.name!r}") from None
            elif op == "const":
                vals[i] = node.attrs
            else:
                vals[i] = _FORWARD[op](node, *(vals[j] for j in self._args[i]))
        return [np.asarray(vals[j]) for j in self._out]


def compile(outputs: Sequence[Expr]) -> Program:  # noqa: A001
    return Program(outputs)


def evaluate(expr: Expr, feed: Dict[str, np.ndarray]) -> np.ndarray:
    return Program([expr])(feed)[0]


# ------------------------------------------------------------ FD checking


@dataclass(frozen=True)
class GradientReport:
    max_relative_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray


def fd_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradient(f, point, h: float = 1e-5, grad=None) -> GradientReport:
    """Compare an analytic gradient against central differences.

    ``f`` returns either the value or ``(value, gradient)``; alternatively pass
    ``grad`` as a callable. The error is measured entrywise against the
    largest numeric entry, ``max|g - g_fd| / max|g_fd|``, with 0/0 read as 0.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    point = np.asarray(point, dtype=float)

    def value(x):
        out = f(x)
        return out[0] if isinstance(out, tuple) else out

    if grad is None:
        out = f(point)
        if not isinstance(out, tuple):
            raise ValueError("f must return (value, gradient) when grad is not given")
        analytic = np.asarray(out[1], dtype=float)
    else:
        analytic = np.asarray(grad(point), dtype=float)
    numeric = fd_gradient(value, point, h)
    diff = np.abs(analytic - numeric).reshape(-1)
    scale = float(np.abs(numeric).max(initial=0.0))
    worst = int(np.argmax(diff)) if diff.size else 0
    if diff.size == 0 or diff[worst] == 0.0:
        err = 0.0
    elif scale == 0.0:
        err = float("inf")
    else:
        err = float(diff[worst] / scale)
    return GradientReport(err, worst, analytic, numeric)
