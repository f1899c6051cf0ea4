"""Reverse-mode automatic differentiation over dense complex matrices.

Values live on a dynamic tape as complex128 ndarrays of shape (m, n) or
(batch, m, n).  Gradients follow the real-pair convention: for a real loss L
the adjoint of a node X is G with Re(G) = dL/dRe(X) and Im(G) = dL/dIm(X),
so a descent step X - lr * G decreases L and central finite differences on
the real and imaginary parts check G entry by entry.  Under this convention
the matrix rules are the familiar ones with Hermitian transposes, e.g. for
C = A @ B: G_A = G_C @ B^H, G_B = A^H @ G_C.

The tape is rebuilt per forward pass and is single-threaded while under
construction; exported values are plain arrays, safe to share.
"""

from __future__ import annotations

import numpy as np

HERMITIAN_TOL = 1e-8       # max |A - A^H| accepted by logdet
COND_LIMIT = 1e12          # 1-norm condition estimate rejected by inverse
IMAG_LOSS_TOL = 1e-10      # residual imaginary part allowed in a loss root


class GraphError(ValueError):
    """Raised when a tape operation receives an invalid operand."""


class ComplexMatrix:
    """Dense complex matrix stored as paired real/imaginary float64 parts."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None):
        re = np.asarray(re, dtype=np.float64)
        im = np.zeros_like(re) if im is None else np.asarray(im, dtype=np.float64)
        if re.shape != im.shape or re.ndim != 2:
            raise GraphError(f"re/im parts must be equal 2-D shapes, got {re.shape} and {im.shape}")
        self.re = re
        self.im = im

    @classmethod
    def from_complex(cls, z):
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    @property
    def rows(self):
        return self.re.shape[0]

    @property
    def cols(self):
        return self.re.shape[1]

    def to_complex(self):
        return self.re + 1j * self.im

    def validate(self):
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise GraphError("ComplexMatrix contains non-finite entries")
        return self


def as_complex(x):
    """Coerce ComplexMatrix / array-like to a complex128 ndarray of ndim 2 or 3."""
    if isinstance(x, ComplexMatrix):
        return x.to_complex()
    z = np.asarray(x, dtype=np.complex128)
    if z.ndim not in (2, 3):
        raise GraphError(f"expected a matrix or batch of matrices, got ndim {z.ndim}")
    return z


def as_matrix(x):
    """Like as_complex, but real input stays float64.

    A real array is a complex one with zero imaginary part; keeping it real
    halves the arithmetic on purely real subgraphs (dense real-weight nets)
    while every vjp still agrees with the complex computation at zero imag.
    """
    if isinstance(x, ComplexMatrix):
        return x.to_complex()
    z = np.asarray(x)
    z = z.astype(np.complex128 if np.iscomplexobj(z) else np.float64, copy=False)
    if z.ndim not in (2, 3):
        raise GraphError(f"expected a matrix or batch of matrices, got ndim {z.ndim}")
    return z


def _herm(z):
    zt = np.swapaxes(z, -1, -2)
    # conj of a real array would be a gratuitous copy
    return np.conj(zt) if np.iscomplexobj(zt) else zt


def _reduce_to(grad, value):
    # collapse a batched adjoint onto an unbatched node (broadcast transpose)
    if grad.ndim == 3 and value.ndim == 2:
        return grad.sum(axis=0)
    return grad


def _unbroadcast(grad, shape):
    # sum an adjoint back down to the shape numpy broadcast it up from
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Node:
    """One tape entry: an operation, its operands, its value, and its vjp."""

    __slots__ = ("nid", "op", "inputs", "value", "adjoint", "requires_grad", "_vjp")

    def __init__(self, nid, op, inputs, value, requires_grad, vjp=None):
        self.nid = nid
        self.op = op
        self.inputs = inputs
        self.value = value
        self.adjoint = None
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.nid}, op={self.op}, shape={self.value.shape})"


class Tape:
    """Dynamic DAG of matrix operations, rebuilt per forward pass."""

    def __init__(self):
        self.nodes = []

    # -- leaves ----------------------------------------------------------

    def _record(self, op, inputs, value, vjp=None):
        rg = vjp is not None and any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, inputs, value, rg, vjp if rg else None)
        self.nodes.append(node)
        return node

    def constant(self, x):
        return self._record("const", (), as_matrix(x))

    def parameter(self, x):
        z = as_matrix(x)
        if not np.all(np.isfinite(z)):
            raise GraphError("parameter value contains non-finite entries")
        node = Node(len(self.nodes), "param", (), z, True)
        self.nodes.append(node)
        return node

    # -- primitives ------------------------------------------------------

    def add(self, a, b):
        self._check_conformable(a, b, "add")
        return self._record("add", (a, b), a.value + b.value,
                            lambda g: ((a, g), (b, g)))

    def sub(self, a, b):
        self._check_conformable(a, b, "sub")
        return self._record("sub", (a, b), a.value - b.value,
                            lambda g: ((a, g), (b, -g)))

    def add_n(self, nodes):
        nodes = list(nodes)
        if not nodes:
            raise GraphError("add_n needs at least one operand")
        for other in nodes[1:]:
            self._check_conformable(nodes[0], other, "add_n")
        total = nodes[0].value
        for n in nodes[1:]:
            total = total + n.value
        return self._record("add_n", tuple(nodes), total,
                            lambda g: tuple((n, g) for n in nodes))

    def scale(self, a, c):
        # complex scalars allowed; in the paired-real convention the pullback
        # of y = c*a is conj(c)*g (rotation acts inversely on the gradient)
        c = complex(c)
        if c.imag == 0.0:
            c = c.real
        return self._record("scale", (a,), c * a.value,
                            lambda g: ((a, np.conj(c) * g),))

    def matmul(self, a, b):
        if a.value.shape[-1] != b.value.shape[-2]:
            raise GraphError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape} "
                             f"(nodes {a.nid}, {b.nid})")

        def vjp(g):
            out = []
            if a.requires_grad:
                out.append((a, g @ _herm(b.value)))
            if b.requires_grad:
                out.append((b, _herm(a.value) @ g))
            return tuple(out)

        return self._record("matmul", (a, b), a.value @ b.value, vjp)

    def hermitian(self, a):
        return self._record("hermitian", (a,), _herm(a.value),
                            lambda g: ((a, _herm(g)),))

    def inverse(self, a):
        self._check_square(a, "inverse")
        try:
            inv = np.linalg.inv(a.value)
        except np.linalg.LinAlgError as exc:
            raise GraphError(f"singular matrix in inverse at node {a.nid}: {exc}") from exc
        norm1 = np.abs(a.value).sum(axis=-2).max(axis=-1)
        norm1_inv = np.abs(inv).sum(axis=-2).max(axis=-1)
        cond = float(np.max(norm1 * norm1_inv))
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise GraphError(f"singular matrix in inverse at node {a.nid}: cond~{cond:.3e}")

        def vjp(g, inv=inv):
            ih = _herm(inv)
            return ((a, -(ih @ g @ ih)),)

        return self._record("inverse", (a,), inv, vjp)

    def logdet(self, a):
        """Natural-log determinant of a Hermitian positive definite matrix."""
        self._check_square(a, "logdet")
        dev = float(np.max(np.abs(a.value - _herm(a.value))))
        if dev > HERMITIAN_TOL:
            raise GraphError(f"logdet input at node {a.nid} is not Hermitian (deviation {dev:.3e})")
        try:
            chol = np.linalg.cholesky(a.value)
        except np.linalg.LinAlgError as exc:
            raise GraphError(f"logdet input at node {a.nid} is not positive definite: {exc}") from exc
        diag = np.real(np.diagonal(chol, axis1=-2, axis2=-1))
        # logdet of a Hermitian PD matrix is real
        ld = 2.0 * np.sum(np.log(diag), axis=-1)
        value = np.asarray(ld)[..., None, None]

        def vjp(g, a=a):
            ainv_h = _herm(np.linalg.inv(a.value))
            return ((a, g * ainv_h),)

        return self._record("logdet", (a,), value, vjp)

    def trace(self, a):
        self._check_square(a, "trace")
        tr = np.trace(a.value, axis1=-2, axis2=-1)
        value = np.asarray(tr)[..., None, None]
        n = a.value.shape[-1]
        eye = np.eye(n)
        return self._record("trace", (a,), value,
                            lambda g: ((a, g * eye),))

    def re(self, a):
        """Real part, as a real-dtype node."""
        return self._record("re", (a,), np.real(a.value),
                            lambda g: ((a, np.real(g)),))

    def complexify(self, a, b):
        """a + 1j*b from two real-dtype nodes."""
        self._check_conformable(a, b, "complexify")
        if np.iscomplexobj(a.value) or np.iscomplexobj(b.value):
            raise GraphError("complexify needs real-dtype operands")

        def vjp(g):
            # splitting the adjoint back into channels keeps the upstream
            # real subgraph in real arithmetic; its imaginary adjoint
            # channel is inert (real ops never mix it into the real one)
            return ((a, np.real(g)), (b, np.imag(g)))

        return self._record("complexify", (a, b), a.value + 1j * b.value, vjp)

    def im(self, a):
        """Imaginary part, as a real-dtype node.

        The adjoint 1j*Re(g) is what the identity im(z) = -0.5j*(z - conj(z))
        pulls back; re/im followed by re + 1j*im is lossless either way.
        """
        return self._record("im", (a,), np.imag(a.value),
                            lambda g: ((a, 1j * np.real(g)),))

    def tanh(self, a):
        """Split nonlinearity: tanh applied separately to real and imaginary parts."""
        if np.iscomplexobj(a.value):
            tr = np.tanh(a.value.real)
            ti = np.tanh(a.value.imag)
            return self._record(
                "tanh", (a,), tr + 1j * ti,
                lambda g: ((a, (1.0 - tr * tr) * g.real + 1j * (1.0 - ti * ti) * g.imag),))
        t = np.tanh(a.value)

        def vjp(g):
            gr = (1.0 - t * t) * np.real(g)
            if np.iscomplexobj(g):
                # tanh'(0) = 1 on the (identically zero) imaginary channel
                return ((a, gr + 1j * np.imag(g)),)
            return ((a, gr),)

        return self._record("tanh", (a,), t, vjp)

    def concat(self, nodes, axis):
        nodes = list(nodes)
        if axis not in (-1, -2):
            raise GraphError("concat axis must be -1 (columns) or -2 (rows)")
        ndims = {n.value.ndim for n in nodes}
        if len(ndims) != 1:
            raise GraphError("concat operands must be uniformly batched")
        value = np.concatenate([n.value for n in nodes], axis=axis)
        sizes = [n.value.shape[axis] for n in nodes]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            out = []
            for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                out.append((n, g[tuple(sl)]))
            return tuple(out)

        return self._record("concat", tuple(nodes), value, vjp)

    def slice(self, a, rows, cols):
        """Sub-block a[..., r0:r1, c0:c1]; rows/cols are (start, stop) pairs."""
        r0, r1 = rows
        c0, c1 = cols
        m, n = a.value.shape[-2:]
        if not (0 <= r0 < r1 <= m and 0 <= c0 < c1 <= n):
            raise GraphError(f"slice ({rows}, {cols}) out of range for shape {a.value.shape}")
        value = a.value[..., r0:r1, c0:c1]

        def vjp(g):
            full = np.zeros(g.shape[:-2] + (m, n), dtype=g.dtype)
            full[..., r0:r1, c0:c1] = g
            return ((a, full),)

        return self._record("slice", (a,), value, vjp)

    def reshape(self, a, shape):
        m, n = shape
        lead = a.value.shape[:-2]
        if int(np.prod(a.value.shape[-2:])) != m * n:
            raise GraphError(f"cannot reshape {a.value.shape} to {shape}")
        old = a.value.shape
        return self._record("reshape", (a,), a.value.reshape(lead + (m, n)),
                            lambda g: ((a, g.reshape(old)),))

    def invdiag(self, a):
        """diag(1/a_11, ..., 1/a_nn); off-diagonal entries of a are ignored."""
        self._check_square(a, "invdiag")
        d = np.diagonal(a.value, axis1=-2, axis2=-1)
        if float(np.min(np.abs(d))) < 1e-12:
            raise GraphError(f"invdiag at node {a.nid}: zero diagonal entry")
        n = a.value.shape[-1]
        idx = np.arange(n)
        value = np.zeros(a.value.shape, dtype=a.value.dtype)
        value[..., idx, idx] = 1.0 / d

        def vjp(g, d=d):
            gd = np.conj(-1.0 / (d * d)) * g[..., idx, idx]
            out = np.zeros(g.shape[:-2] + (n, n), dtype=gd.dtype)
            out[..., idx, idx] = gd
            return ((a, out),)

        return self._record("invdiag", (a,), value, vjp)

    def scale_to_power(self, a, p_max):
        """Rescale so the squared Frobenius norm is at most p_max (per batch sample)."""
        p_max = float(p_max)
        pw = np.sum(a.value.real ** 2 + a.value.imag ** 2, axis=(-2, -1))
        factor = np.where(pw > p_max, np.sqrt(p_max / np.maximum(pw, 1e-300)), 1.0)
        value = factor[..., None, None] * a.value

        def vjp(g, pw=pw, factor=factor):
            s = np.sum(g.real * a.value.real + g.imag * a.value.imag, axis=(-2, -1))
            coeff = np.where(pw > p_max, s * factor / np.maximum(pw, 1e-300), 0.0)
            return ((a, factor[..., None, None] * g - coeff[..., None, None] * a.value),)

        return self._record("power_clip", (a,), value, vjp)

    def batch_mean(self, a):
        if a.value.ndim != 3:
            raise GraphError("batch_mean needs a batched operand")
        b = a.value.shape[0]
        return self._record("batch_mean", (a,), a.value.mean(axis=0),
                            lambda g: ((a, np.broadcast_to(g / b, (b,) + g.shape)),))

    # -- batch layout ------------------------------------------------------
    # Linear index shuffles that fold a block structure into the batch axis
    # (and back), so per-block loops become single batched ops.

    def tile_batch(self, a, r):
        """Repeat each batch sample r times: (B, m, n) -> (B*r, m, n)."""
        if a.value.ndim != 3:
            raise GraphError("tile_batch needs a batched operand")
        b, m, n = a.value.shape
        return self._record(
            "tile_batch", (a,), np.repeat(a.value, r, axis=0),
            lambda g: ((a, g.reshape(b, r, m, n).sum(axis=1)),))

    def fold_cols(self, a, r):
        """Split columns into r blocks and stack them on the batch axis.

        (B, m, r*n) -> (B*r, m, n); row b*r + i holds block i of sample b.
        """
        if a.value.ndim != 3 or a.value.shape[-1] % r != 0:
            raise GraphError(f"fold_cols needs batched columns divisible by {r}")
        b, m, rn = a.value.shape
        n = rn // r
        value = np.ascontiguousarray(
            a.value.reshape(b, m, r, n).transpose(0, 2, 1, 3)).reshape(b * r, m, n)
        return self._record(
            "fold_cols", (a,), value,
            lambda g: ((a, np.ascontiguousarray(
                g.reshape(b, r, m, n).transpose(0, 2, 1, 3)).reshape(b, m, rn)),))

    def unfold_cols(self, a, r):
        """Inverse of fold_cols: (B*r, m, n) -> (B, m, r*n)."""
        if a.value.ndim != 3 or a.value.shape[0] % r != 0:
            raise GraphError(f"unfold_cols needs a batch divisible by {r}")
        br, m, n = a.value.shape
        b = br // r
        value = np.ascontiguousarray(
            a.value.reshape(b, r, m, n).transpose(0, 2, 1, 3)).reshape(b, m, r * n)
        return self._record(
            "unfold_cols", (a,), value,
            lambda g: ((a, np.ascontiguousarray(
                g.reshape(b, m, r, n).transpose(0, 2, 1, 3)).reshape(br, m, n)),))

    def sum_fold(self, a, r):
        """Sum groups of r consecutive batch samples: (B*r, m, n) -> (B, m, n)."""
        if a.value.ndim != 3 or a.value.shape[0] % r != 0:
            raise GraphError(f"sum_fold needs a batch divisible by {r}")
        br, m, n = a.value.shape
        b = br // r
        return self._record(
            "sum_fold", (a,), a.value.reshape(b, r, m, n).sum(axis=1),
            lambda g: ((a, np.repeat(g, r, axis=0)),))

    def hadamard(self, a, mask):
        """Elementwise product with a constant array (broadcastable to a)."""
        mask = np.asarray(mask)
        return self._record(
            "hadamard", (a,), a.value * mask,
            lambda g: ((a, np.conj(mask) * g if np.iscomplexobj(mask) else mask * g),))

    def mul(self, a, b):
        """Elementwise node product, broadcasting over matching trailing dims."""
        value = a.value * b.value

        def vjp(g):
            out = []
            if a.requires_grad:
                out.append((a, _unbroadcast(np.conj(b.value) * g, a.value.shape)))
            if b.requires_grad:
                out.append((b, _unbroadcast(np.conj(a.value) * g, b.value.shape)))
            return tuple(out)

        return self._record("mul", (a, b), value, vjp)

    # -- reverse pass ------------------------------------------------------

    def backward(self, root):
        """Adjoints of every parameter node for a real scalar root."""
        if root.value.shape[-2:] != (1, 1) or root.value.ndim != 2:
            raise GraphError(f"backward root must be an unbatched 1x1 scalar, got {root.value.shape}")
        imag = abs(float(root.value.imag[0, 0]))
        if imag > IMAG_LOSS_TOL:
            raise GraphError(f"loss has imaginary residual {imag:.3e}; graph is not real-valued")

        # real seed: adjoints stay real across real subgraphs and only
        # promote to complex where the values do
        adjoints = {root.nid: np.ones((1, 1))}
        grads = {}
        for node in reversed(self.nodes[: root.nid + 1]):
            g = adjoints.pop(node.nid, None)
            if g is None or not node.requires_grad:
                continue
            if node.op == "param":
                grads[node.nid] = g
                continue
            for inp, contrib in node._vjp(g):
                if not inp.requires_grad:
                    continue
                contrib = _reduce_to(contrib, inp.value)
                prev = adjoints.get(inp.nid)
                adjoints[inp.nid] = contrib if prev is None else prev + contrib
        return grads

    # -- helpers -----------------------------------------------------------

    @staticmethod
    def _check_conformable(a, b, op):
        sa, sb = a.value.shape[-2:], b.value.shape[-2:]
        if sa != sb:
            raise GraphError(f"{op} shape mismatch {a.value.shape} vs {b.value.shape} "
                             f"(nodes {a.nid}, {b.nid})")

    @staticmethod
    def _check_square(a, op):
        if a.value.shape[-2] != a.value.shape[-1]:
            raise GraphError(f"{op} needs a square matrix, got {a.value.shape} (node {a.nid})")


def eval_scalar(build, x):
    """Evaluate a scalar-graph builder at a constant input, returning the real value."""
    tape = Tape()
    root = build(tape, tape.constant(x))
    return float(root.value.real[0, 0])


def grad_check(build, x, step=1e-5):
    """Max relative error between tape gradients and central finite differences.

    `build(tape, node) -> node` must construct a real scalar graph from its
    input node.  Differences are taken on every real and imaginary entry.
    """
    if not 1e-7 <= step <= 1e-3:
        raise GraphError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    x = as_complex(x)
    tape = Tape()
    xn = tape.parameter(x)
    root = build(tape, xn)
    analytic = tape.backward(root)[xn.nid]

    numeric = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        for part, unit in ((0, 1.0), (1, 1j)):
            xp = flat.copy()
            xp[i] += step * unit
            up = eval_scalar(build, xp.reshape(x.shape))
            xm = flat.copy()
            xm[i] -= step * unit
            um = eval_scalar(build, xm.reshape(x.shape))
            d = (up - um) / (2.0 * step)
            if part == 0:
                numeric.ravel()[i] += d
            else:
                numeric.ravel()[i] += 1j * d

    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(np.max(err))
