"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Values are computed eagerly as nodes are appended, so the tape doubles as a
record of the forward pass; ``backward`` walks it in reverse. Every value is
a 2-D array (scalars are (1, 1)) and shapes are checked at node construction,
never at evaluation. Broadcasting is limited to (matrix, row-vector) addition.

Conventions: relu'(0) = 0; the adjoint of sqrt at 0 is 0. Gather and
scatter-add over rows are mutually adjoint, which is what makes per-receiver
message sums differentiable.
"""

from __future__ import annotations

import numpy as np


class Param:
    """A named trainable tensor with a gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, dtype=float)
        if self.value.ndim != 2:
            raise ValueError(f"Param {name!r} must be 2-D, got {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[:] = 0.0


def _as2d(x):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected <=2-D value, got shape {a.shape}")
    return a


class Tape:
    """Append-only list of primitive ops; insertion order is topological order."""

    def __init__(self):
        self.ops = []  # (opname, parent ids, aux)
        self.values = []
        self.params = {}  # node id -> Param, for leaves

    # -- leaves ------------------------------------------------------------

    def const(self, x) -> int:
        return self._push("const", (), _as2d(x), None)

    def param(self, p: Param, frozen: bool = False) -> int:
        nid = self._push("const" if frozen else "param", (), p.value.copy(), None)
        if not frozen:
            self.params[nid] = p
        return nid

    def _push(self, op, parents, value, aux) -> int:
        self.ops.append((op, parents, aux))
        self.values.append(value)
        return len(self.values) - 1

    def value(self, nid: int):
        return self.values[nid]

    def shape(self, nid: int):
        return self.values[nid].shape

    # -- primitives ----------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        if self.shape(a) != self.shape(b):
            raise ValueError(f"add shape mismatch {self.shape(a)} vs {self.shape(b)}")
        return self._push("add", (a, b), self.values[a] + self.values[b], None)

    def add_row(self, a: int, b: int) -> int:
        """(n, k) + (1, k) broadcast."""
        if self.shape(b) != (1, self.shape(a)[1]):
            raise ValueError(f"add_row needs (1, {self.shape(a)[1]}), got {self.shape(b)}")
        return self._push("add_row", (a, b), self.values[a] + self.values[b], None)

    def mul(self, a: int, b: int) -> int:
        if self.shape(a) != self.shape(b):
            raise ValueError(f"mul shape mismatch {self.shape(a)} vs {self.shape(b)}")
        return self._push("mul", (a, b), self.values[a] * self.values[b], None)

    def scale(self, a: int, c: float) -> int:
        return self._push("scale", (a,), self.values[a] * float(c), float(c))

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.scale(b, -1.0))

    def matmul(self, a: int, b: int) -> int:
        if self.shape(a)[1] != self.shape(b)[0]:
            raise ValueError(f"matmul shape mismatch {self.shape(a)} @ {self.shape(b)}")
        return self._push("matmul", (a, b), self.values[a] @ self.values[b], None)

    def relu(self, a: int) -> int:
        return self._push("relu", (a,), np.maximum(self.values[a], 0.0), None)

    def square(self, a: int) -> int:
        return self._push("square", (a,), self.values[a] ** 2, None)

    def sqrt(self, a: int) -> int:
        v = self.values[a]
        if (v < 0).any():
            raise ValueError("sqrt of negative value")
        return self._push("sqrt", (a,), np.sqrt(v), None)

    def sin(self, a: int) -> int:
        return self._push("sin", (a,), np.sin(self.values[a]), None)

    def cos(self, a: int) -> int:
        return self._push("cos", (a,), np.cos(self.values[a]), None)

    def sum(self, a: int) -> int:
        return self._push("sum", (a,), np.array([[self.values[a].sum()]]), None)

    def gather_rows(self, a: int, idx) -> int:
        idx = np.asarray(idx, dtype=int).ravel()
        if len(idx) and (idx.min() < 0 or idx.max() >= self.shape(a)[0]):
            raise ValueError("gather index out of range")
        return self._push("gather", (a,), self.values[a][idx], idx)

    def scatter_add_rows(self, a: int, idx, n_rows: int) -> int:
        """out[idx[r]] += a[r]; rows of `a` accumulate into an (n_rows, k) zero matrix."""
        idx = np.asarray(idx, dtype=int).ravel()
        if len(idx) != self.shape(a)[0]:
            raise ValueError("scatter index count must match row count")
        if len(idx) and (idx.min() < 0 or idx.max() >= n_rows):
            raise ValueError("scatter index out of range")
        out = np.zeros((n_rows, self.shape(a)[1]))
        np.add.at(out, idx, self.values[a])
        return self._push("scatter", (a,), out, idx)

    def concat_cols(self, nids) -> int:
        nids = tuple(nids)
        rows = {self.shape(n)[0] for n in nids}
        if len(rows) != 1:
            raise ValueError(f"concat_cols row mismatch: {[self.shape(n) for n in nids]}")
        widths = [self.shape(n)[1] for n in nids]
        value = np.concatenate([self.values[n] for n in nids], axis=1)
        return self._push("concat", nids, value, widths)

    def slice_cols(self, a: int, j0: int, j1: int) -> int:
        if not 0 <= j0 < j1 <= self.shape(a)[1]:
            raise ValueError("bad column slice")
        return self._push("slice", (a,), self.values[a][:, j0:j1].copy(), (j0, j1))

    # -- evaluation ----------------------------------------------------------

    def forward(self):
        """Re-evaluate every node in order (values are already computed eagerly;
        this recomputes them from the leaves and returns the full list)."""
        out = []
        for nid, (op, parents, aux) in enumerate(self.ops):
            v = [out[p] for p in parents]
            if op in ("const", "param"):
                out.append(self.values[nid])
            elif op == "add" or op == "add_row":
                out.append(v[0] + v[1])
            elif op == "mul":
                out.append(v[0] * v[1])
            elif op == "scale":
                out.append(v[0] * aux)
            elif op == "matmul":
                out.append(v[0] @ v[1])
            elif op == "relu":
                out.append(np.maximum(v[0], 0.0))
            elif op == "square":
                out.append(v[0] ** 2)
            elif op == "sqrt":
                out.append(np.sqrt(v[0]))
            elif op == "sin":
                out.append(np.sin(v[0]))
            elif op == "cos":
                out.append(np.cos(v[0]))
            elif op == "sum":
                out.append(np.array([[v[0].sum()]]))
            elif op == "gather":
                out.append(v[0][aux])
            elif op == "scatter":
                acc = np.zeros_like(self.values[nid])
                np.add.at(acc, aux, v[0])
                out.append(acc)
            elif op == "concat":
                out.append(np.concatenate(v, axis=1))
            elif op == "slice":
                out.append(v[0][:, aux[0]:aux[1]].copy())
            else:  # pragma: no cover
                raise AssertionError(op)
        self.values = out
        return out

    def backward(self, root: int):
        """Accumulate d(root)/d(param) into each Param.grad. Root must be scalar."""
        if self.shape(root) != (1, 1):
            raise ValueError("backward root must be a (1, 1) scalar")
        adj = {root: np.ones((1, 1))}
        for nid in range(root, -1, -1):
            g = adj.pop(nid, None)
            if g is None:
                continue
            op, parents, aux = self.ops[nid]
            if op == "const":
                continue
            if op == "param":
                self.params[nid].grad += g
                continue
            if op == "add":
                self._acc(adj, parents[0], g)
                self._acc(adj, parents[1], g)
            elif op == "add_row":
                self._acc(adj, parents[0], g)
                self._acc(adj, parents[1], g.sum(axis=0, keepdims=True))
            elif op == "mul":
                self._acc(adj, parents[0], g * self.values[parents[1]])
                self._acc(adj, parents[1], g * self.values[parents[0]])
            elif op == "scale":
                self._acc(adj, parents[0], g * aux)
            elif op == "matmul":
                a, b = parents
                self._acc(adj, a, g @ self.values[b].T)
                self._acc(adj, b, self.values[a].T @ g)
            elif op == "relu":
                self._acc(adj, parents[0], g * (self.values[parents[0]] > 0))
            elif op == "square":
                self._acc(adj, parents[0], g * 2.0 * self.values[parents[0]])
            elif op == "sqrt":
                v = self.values[nid]
                d = np.where(v > 0, 0.5 / np.where(v > 0, v, 1.0), 0.0)
                self._acc(adj, parents[0], g * d)
            elif op == "sin":
                self._acc(adj, parents[0], g * np.cos(self.values[parents[0]]))
            elif op == "cos":
                self._acc(adj, parents[0], -g * np.sin(self.values[parents[0]]))
            elif op == "sum":
                self._acc(adj, parents[0], np.full_like(self.values[parents[0]], g[0, 0]))
            elif op == "gather":
                back = np.zeros_like(self.values[parents[0]])
                np.add.at(back, aux, g)
                self._acc(adj, parents[0], back)
            elif op == "scatter":
                self._acc(adj, parents[0], g[aux])
            elif op == "concat":
                j = 0
                for p, w in zip(parents, aux):
                    self._acc(adj, p, g[:, j:j + w])
                    j += w
            elif op == "slice":
                back = np.zeros_like(self.values[parents[0]])
                back[:, aux[0]:aux[1]] = g
                self._acc(adj, parents[0], back)
            else:  # pragma: no cover
                raise AssertionError(op)

    @staticmethod
    def _acc(adj, nid, g):
        if nid in adj:
            adj[nid] = adj[nid] + g
        else:
            adj[nid] = g


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `f` maps a flat vector to (scalar value, gradient vector).
    """
    x = np.asarray(x, dtype=float).ravel()
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=float).ravel()
    worst = 0.0
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        hi, _ = f(x + e)
        lo, _ = f(x - e)
        numeric = (hi - lo) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
