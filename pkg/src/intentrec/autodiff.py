"""Reverse-mode differentiation over the fixed operation set the model needs.

Everything is computed in float64. A :class:`Tape` records each operation as it
runs (define-by-run; the graph structure depends on batch composition, so the
tape is rebuilt every step) and replays backward rules in reverse order on
:meth:`Tape.backward`. Only the operations below exist; there is no general
broadcasting and no graph optimization.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Tensor:
    """A float64 array with a gradient slot.

    Used both for trainable leaf parameters (create via :func:`param`, grad is
    pre-allocated and zeroed between steps) and for intermediate tape nodes
    (grad is allocated lazily during backward; ``None`` means unreachable).
    """

    __slots__ = ("values", "grad", "name")

    def __init__(self, values, name: str = ""):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.values.shape}>"


def param(values, name: str) -> Tensor:
    """Create a trainable leaf. Rejects non-finite values."""
    t = Tensor(values, name=name)
    if not np.all(np.isfinite(t.values)):
        raise ContractError(f"parameter {name!r} contains non-finite values")
    t.zero_grad()
    return t


def _buf(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    return t.grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Stable log(sigmoid(x)) on raw arrays (shared with oracle-free call sites)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))


def softmax_values(x: np.ndarray) -> np.ndarray:
    """Plain softmax over the last axis of a raw array (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class Tape:
    """Ordered record of operations; backward replays them in reverse.

    Each op validates its input shapes (raising :class:`ContractError` naming
    the op) and appends a (output, backward-closure) pair. Gradients accumulate
    additively, so a tensor used twice receives the sum of both paths.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __len__(self) -> int:
        return len(self._records)

    def _emit(self, out: Tensor, backward) -> Tensor:
        self._records.append((out, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        if loss.shape != ():
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones((), dtype=np.float64)
        for out, bw in reversed(self._records):
            if out.grad is not None:
                bw(out.grad)

    # ---- indexing ----

    def gather(self, x: Tensor, idx: np.ndarray) -> Tensor:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1:
            raise ContractError(f"gather: index must be 1-D, got shape {idx.shape}")
        out = Tensor(x.values[idx])

        def bw(go):
            np.add.at(_buf(x), idx, go)

        return self._emit(out, bw)

    def row(self, x: Tensor, i: int) -> Tensor:
        if x.values.ndim != 2:
            raise ContractError(f"row: expected matrix, got shape {x.shape}")
        out = Tensor(x.values[i])

        def bw(go):
            _buf(x)[i] += go

        return self._emit(out, bw)

    def col(self, x: Tensor, j: int) -> Tensor:
        if x.values.ndim != 2:
            raise ContractError(f"col: expected matrix, got shape {x.shape}")
        out = Tensor(x.values[:, j])

        def bw(go):
            _buf(x)[:, j] += go

        return self._emit(out, bw)

    def take_diag(self, x: Tensor) -> Tensor:
        n, m = x.values.shape
        if n != m:
            raise ContractError(f"take_diag: matrix must be square, got {x.shape}")
        out = Tensor(np.diagonal(x.values).copy())

        def bw(go):
            g = _buf(x)
            g[np.arange(n), np.arange(n)] += go

        return self._emit(out, bw)

    # ---- aggregation ----

    def segment_mean(self, x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
        """Mean of x's rows grouped by segment id; empty segments yield zero rows."""
        seg = np.asarray(seg, dtype=np.intp)
        if x.values.ndim != 2 or seg.shape != (x.values.shape[0],):
            raise ContractError(
                f"segment_mean: rows {x.shape} do not match segment ids {seg.shape}"
            )
        counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        # shifted mean (base row + mean residual): exact when a segment's rows
        # are identical, which plain sum-then-divide is not
        first = np.full(num_segments, len(seg), dtype=np.intp)
        np.minimum.at(first, seg, np.arange(len(seg), dtype=np.intp))
        base = np.zeros((num_segments, x.values.shape[1]))
        has = first < len(seg)
        base[has] = x.values[first[has]]
        acc = np.zeros_like(base)
        np.add.at(acc, seg, x.values - base[seg])
        out = Tensor(base + acc * inv[:, None])

        def bw(go):
            _buf(x)[...] += go[seg] * inv[seg, None]

        return self._emit(out, bw)

    # ---- elementwise / linear ----

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product; b may be a 1-D vector broadcast across a's rows."""
        av, bv = a.values, b.values
        row_bcast = av.ndim == 2 and bv.ndim == 1 and bv.shape[0] == av.shape[1]
        if not row_bcast and av.shape != bv.shape:
            raise ContractError(f"mul: shapes {a.shape} and {b.shape} do not align")
        out = Tensor(av * bv)

        def bw(go):
            _buf(a)[...] += go * bv
            if row_bcast:
                _buf(b)[...] += (go * av).sum(axis=0)
            else:
                _buf(b)[...] += go * av

        return self._emit(out, bw)

    def rowscale(self, x: Tensor, s: np.ndarray) -> Tensor:
        """Scale each row of x by a constant per-row factor (not differentiated)."""
        s = np.asarray(s, dtype=np.float64)
        if x.values.ndim != 2 or s.shape != (x.values.shape[0],):
            raise ContractError(f"rowscale: rows {x.shape} do not match factors {s.shape}")
        out = Tensor(x.values * s[:, None])

        def bw(go):
            _buf(x)[...] += go * s[:, None]

        return self._emit(out, bw)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ContractError(f"add: shapes {a.shape} and {b.shape} differ")
        out = Tensor(a.values + b.values)

        def bw(go):
            _buf(a)[...] += go
            _buf(b)[...] += go

        return self._emit(out, bw)

    def add_n(self, parts: list[Tensor]) -> Tensor:
        if not parts:
            raise ContractError("add_n: empty input list")
        shape = parts[0].shape
        for p in parts:
            if p.shape != shape:
                raise ContractError(f"add_n: mixed shapes {shape} and {p.shape}")
        out = Tensor(sum(p.values for p in parts))

        def bw(go):
            for p in parts:
                _buf(p)[...] += go

        return self._emit(out, bw)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ContractError(f"sub: shapes {a.shape} and {b.shape} differ")
        out = Tensor(a.values - b.values)

        def bw(go):
            _buf(a)[...] += go
            _buf(b)[...] -= go

        return self._emit(out, bw)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        out = Tensor(x.values * c)

        def bw(go):
            _buf(x)[...] += go * c

        return self._emit(out, bw)

    def concat_cols(self, parts: list[Tensor]) -> Tensor:
        if not parts:
            raise ContractError("concat_cols: empty input list")
        rows = parts[0].values.shape[0]
        for p in parts:
            if p.values.ndim != 2 or p.values.shape[0] != rows:
                raise ContractError(
                    f"concat_cols: expected {rows}-row matrices, got {p.shape}"
                )
        widths = [p.values.shape[1] for p in parts]
        out = Tensor(np.concatenate([p.values for p in parts], axis=1))
        offsets = np.cumsum([0] + widths)

        def bw(go):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _buf(p)[...] += go[:, lo:hi]

        return self._emit(out, bw)

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """x @ w.T + b with w of shape (out_dim, in_dim); x may be a vector or matrix."""
        wv, bv = w.values, b.values
        if wv.ndim != 2 or bv.shape != (wv.shape[0],):
            raise ContractError(f"affine: weight {w.shape} and bias {b.shape} mismatch")
        xv = x.values
        if xv.shape[-1] != wv.shape[1]:
            raise ContractError(f"affine: input {x.shape} does not match weight {w.shape}")
        out = Tensor(xv @ wv.T + bv)

        def bw(go):
            _buf(x)[...] += go @ wv
            if xv.ndim == 1:
                _buf(w)[...] += np.outer(go, xv)
                _buf(b)[...] += go
            else:
                _buf(w)[...] += go.T @ xv
                _buf(b)[...] += go.sum(axis=0)

        return self._emit(out, bw)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        av, bv = a.values, b.values
        if av.shape[-1] != bv.shape[0]:
            raise ContractError(f"matmul: shapes {a.shape} and {b.shape} do not align")
        out = Tensor(av @ bv)

        def bw(go):
            if av.ndim == 1:
                _buf(a)[...] += go @ bv.T if bv.ndim == 2 else go * bv
                _buf(b)[...] += np.outer(av, go) if bv.ndim == 2 else go * av
            else:
                _buf(a)[...] += np.outer(go, bv) if bv.ndim == 1 else go @ bv.T
                _buf(b)[...] += av.T @ go

        return self._emit(out, bw)

    def matmul_nt(self, a: Tensor, b: Tensor) -> Tensor:
        """a @ b.T for two row-major matrices with a shared feature axis."""
        av, bv = a.values, b.values
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
            raise ContractError(f"matmul_nt: shapes {a.shape} and {b.shape} do not align")
        out = Tensor(av @ bv.T)

        def bw(go):
            _buf(a)[...] += go @ bv
            _buf(b)[...] += go.T @ av

        return self._emit(out, bw)

    def outer(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 1 or b.values.ndim != 1:
            raise ContractError(f"outer: expected vectors, got {a.shape} and {b.shape}")
        out = Tensor(np.outer(a.values, b.values))

        def bw(go):
            _buf(a)[...] += go @ b.values
            _buf(b)[...] += a.values @ go

        return self._emit(out, bw)

    # ---- reductions / nonlinearities ----

    def softmax(self, x: Tensor) -> Tensor:
        if x.values.ndim not in (1, 2):
            raise ContractError(f"softmax: expected vector or matrix, got {x.shape}")
        s = softmax_values(x.values)
        out = Tensor(s)

        def bw(go):
            inner = (go * s).sum(axis=-1, keepdims=x.values.ndim == 2)
            _buf(x)[...] += s * (go - inner)

        return self._emit(out, bw)

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 1 or a.shape != b.shape:
            raise ContractError(f"dot: expected equal-length vectors, got {a.shape}, {b.shape}")
        out = Tensor(a.values @ b.values)

        def bw(go):
            _buf(a)[...] += go * b.values
            _buf(b)[...] += go * a.values

        return self._emit(out, bw)

    def rowwise_dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or a.shape != b.shape:
            raise ContractError(f"rowwise_dot: shapes {a.shape} and {b.shape} differ")
        out = Tensor((a.values * b.values).sum(axis=1))

        def bw(go):
            _buf(a)[...] += go[:, None] * b.values
            _buf(b)[...] += go[:, None] * a.values

        return self._emit(out, bw)

    def normalize_rows(self, x: Tensor, eps: float = 1e-12) -> Tensor:
        """L2-normalize rows (or a single vector); eps guards zero vectors."""
        xv = x.values
        if xv.ndim == 1:
            norm = float(np.linalg.norm(xv))
            n = norm + eps
            out = Tensor(xv / n)

            def bw(go, norm=norm, n=n):
                safe = max(norm, eps)
                _buf(x)[...] += go / n - xv * ((go @ xv) / (safe * n * n))

            return self._emit(out, bw)
        if xv.ndim != 2:
            raise ContractError(f"normalize_rows: expected vector or matrix, got {x.shape}")
        norms = np.linalg.norm(xv, axis=1)
        n = norms + eps
        out = Tensor(xv / n[:, None])

        def bw(go):
            safe = np.maximum(norms, eps)
            inner = (go * xv).sum(axis=1)
            _buf(x)[...] += go / n[:, None] - xv * (inner / (safe * n * n))[:, None]

        return self._emit(out, bw)

    def log_sigmoid(self, x: Tensor) -> Tensor:
        out = Tensor(log_sigmoid_values(x.values))

        def bw(go):
            _buf(x)[...] += go * _sigmoid(-x.values)

        return self._emit(out, bw)

    def masked_logsumexp_rows(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Row-wise log-sum-exp restricted to mask==True entries."""
        mask = np.asarray(mask, dtype=bool)
        if x.values.ndim != 2 or mask.shape != x.values.shape:
            raise ContractError(
                f"masked_logsumexp_rows: mask {mask.shape} does not match {x.shape}"
            )
        if not mask.any(axis=1).all():
            raise ContractError("masked_logsumexp_rows: a row has no unmasked entries")
        xm = np.where(mask, x.values, -np.inf)
        mx = xm.max(axis=1)
        lse = mx + np.log(np.exp(xm - mx[:, None]).sum(axis=1))
        out = Tensor(lse)
        weights = np.where(mask, np.exp(xm - lse[:, None]), 0.0)

        def bw(go):
            _buf(x)[...] += go[:, None] * weights

        return self._emit(out, bw)

    def sum(self, x: Tensor) -> Tensor:
        out = Tensor(x.values.sum())

        def bw(go):
            _buf(x)[...] += go

        return self._emit(out, bw)

    def mean(self, x: Tensor) -> Tensor:
        size = x.values.size
        if size == 0:
            raise ContractError("mean: empty tensor")
        out = Tensor(x.values.mean())

        def bw(go):
            _buf(x)[...] += go / size

        return self._emit(out, bw)

    def sum_sq(self, x: Tensor) -> Tensor:
        out = Tensor((x.values * x.values).sum())

        def bw(go):
            _buf(x)[...] += 2.0 * x.values * go

        return self._emit(out, bw)


def check_gradient(loss_fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be deterministic, rebuild its tape from the current
    parameter values, and return ``(tape, loss)``. Returns the max relative
    error over all parameter coordinates, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    for p in params:
        p.zero_grad()
    tape, loss = loss_fn()
    tape.backward(loss)
    analytic = [np.array(p.grad, copy=True) for p in params]
    max_rel = 0.0
    for p, grads in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn()[1].values)
            flat[i] = orig - eps
            down = float(loss_fn()[1].values)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
