r"""Tensor Kronecker products and the reshaping operators built on them.

The Kronecker product used throughout follows the package's grouped-index
rule: in ``tkp(a, b)`` the index of ``a`` varies fastest along every mode,
so for vectors ``tkp(a, b) == np.kron(b, a)``.  A factor chain
``[B_1, ..., B_L]`` composes with layer L innermost (fastest) and layer 1
outermost; chained non-overlapping convolution applies B_1 first.

Two reshaping operators expose the multilinear structure:

* ``reshape_R(c, grid)`` returns the matrix whose row (h, j, k) - grid
  positions grouped in canonical order - is the vec of the sub-lattice of
  ``c`` at offset (h, j, k) with per-mode stride ``grid``.  Its defining
  identity is ``reshape_R(tkp(a, b), a.shape) == outer(vec(a), vec(b))``.
* ``reshape_T(c, factor_dims)`` regroups an order-3 tensor into an order-L
  tensor so that a sum of rank-1 Kronecker chains becomes a sum of CP
  outer products, mode l varying with vec(B_l).

Both are pure index permutations: entries are moved, never combined.
"""

from functools import lru_cache, reduce

import numpy as np

from .errors import DimensionError
from .tensor_core import vec

__all__ = [
    "tkp",
    "kron_chain",
    "compose_coeff",
    "reshape_R",
    "reshape_R_indices",
    "reshape_T",
    "nonoverlap_conv",
    "conv_chain_eval",
]


def _lift3(t):
    """View an order<=3 tensor as order 3 by appending unit extents."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim > 3:
        raise DimensionError(f"expected order <= 3, got {t.ndim}")
    if t.ndim == 3:
        return t
    return t.reshape(t.shape + (1,) * (3 - t.ndim), order="F")


def _triple(dims):
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3 or any(d < 1 for d in dims):
        raise DimensionError(f"expected 1..3 positive extents, got {dims}")
    return dims + (1,) * (3 - len(dims))


def tkp(a, b):
    """Kronecker product with a's index fastest along every mode."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != b.ndim:
        raise DimensionError(f"order mismatch: {a.ndim} vs {b.ndim}")
    k = a.ndim
    t = np.tensordot(a, b, axes=0)
    perm = []
    for m in range(k):
        perm += [m, k + m]
    out = [a.shape[m] * b.shape[m] for m in range(k)]
    return t.transpose(perm).reshape(out, order="F")


def kron_chain(factors):
    """Compose ``[B_1, ..., B_L]`` with layer L innermost.

    Equals tkp(B_L, tkp(B_{L-1}, ... tkp(B_2, B_1))); tkp is associative,
    so any grouping gives the same result.
    """
    factors = list(factors)
    if not factors:
        raise DimensionError("factor chain must be non-empty")
    orders = {np.ndim(f) for f in factors}
    if len(orders) != 1:
        raise DimensionError(f"factors must share one order, got orders {sorted(orders)}")
    return reduce(lambda acc, f: tkp(f, acc), factors[1:], np.asarray(factors[0], dtype=np.float64))


def compose_coeff(terms):
    """Sum of Kronecker chains: terms is a list of factor chains, one per rank."""
    terms = list(terms)
    if not terms:
        raise DimensionError("need at least one chain")
    out = kron_chain(terms[0])
    for chain in terms[1:]:
        c = kron_chain(chain)
        if c.shape != out.shape:
            raise DimensionError(f"chains compose to different extents: {c.shape} vs {out.shape}")
        out = out + c
    return out


@lru_cache(maxsize=256)
def _reshape_R_indices_cached(dims3, grid3):
    d, p, q = dims3
    d1, p1, q1 = grid3
    for n, g in zip(dims3, grid3):
        if n % g != 0:
            raise DimensionError(f"grid {grid3} does not divide extents {dims3}")
    d2, p2, q2 = d // d1, p // p1, q // q1
    src = np.arange(d * p * q, dtype=np.intp).reshape(dims3, order="F")
    t6 = src.reshape((d1, d2, p1, p2, q1, q2), order="F")
    out = t6.transpose(0, 2, 4, 1, 3, 5).reshape((d1 * p1 * q1, d2 * p2 * q2), order="F")
    out.setflags(write=False)
    return out

def reshape_R_indices(dims, grid):
    """Index map M with ``reshape_R(c, grid) == vec(c)[M]`` for c of extents ``dims``.

    Precomputing M lets callers apply the reshape to whole batches of
    vectorized tensors with one fancy-indexing gather.
    """
    return _reshape_R_indices_cached(_triple(dims), _triple(grid))


def reshape_R(c, grid):
    """Rearrange an order<=3 tensor into the (grid)-by-(rest) matrix of sub-lattices.

    Row (h, j, k), with grid positions grouped first-index-fastest, is the
    vec of the stride-``grid`` sub-lattice of ``c`` starting at offset
    (h, j, k).  ``grid == c.shape`` gives vec(c) as a column; grid of all
    ones gives vec(c) as a row.
    """
    c3 = _lift3(c)
    return vec(c3)[reshape_R_indices(c3.shape, grid)]


def reshape_T(c, factor_dims):
    """Regroup an order<=3 tensor into one order-L mode per factor level.

    ``factor_dims`` lists per-level extents (d_l, p_l, q_l) for l = 1..L,
    whose per-mode products must equal the extents of ``c``.  In the
    result, mode l is indexed by the vec of a level-l factor: for any
    chain, ``reshape_T(kron_chain(chain), dims)`` is the CP outer product
    of the vecs, and sums of chains map to sums of outer products.
    """
    fd = [_triple(f) for f in factor_dims]
    L = len(fd)
    if L < 1:
        raise DimensionError("factor_dims must be non-empty")
    c3 = _lift3(c)
    for m in range(3):
        if int(np.prod([f[m] for f in fd])) != c3.shape[m]:
            raise DimensionError(
                f"factor extents {[f[m] for f in fd]} do not compose to {c3.shape[m]} in mode {m}"
            )
    # Split each mode with level L fastest, matching the chain composition.
    dsplit = [fd[L - 1 - i][0] for i in range(L)]
    psplit = [fd[L - 1 - i][1] for i in range(L)]
    qsplit = [fd[L - 1 - i][2] for i in range(L)]
    t = c3.reshape(dsplit + psplit + qsplit, order="F")
    perm = []
    for l in range(1, L + 1):
        perm += [L - l, 2 * L - l, 3 * L - l]
    t = t.transpose(perm)
    return t.reshape([f[0] * f[1] * f[2] for f in fd], order="F")


def nonoverlap_conv(x, b):
    """Non-overlapping convolution of ``x`` with kernel ``b``.

    The kernel extents must divide the image extents elementwise; the
    output has extents ``x.shape / b.shape`` and entry (h, j, k) is the
    inner product of ``b`` with the sub-lattice of ``x`` at offset
    (h, j, k) and per-mode stride equal to the output extents.  With this
    gather, ``nonoverlap_conv(tkp(a, b), b) == fro_norm(b)**2 * a``.
    """
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != b.ndim:
        raise DimensionError(f"order mismatch: {x.ndim} vs {b.ndim}")
    ndim = x.ndim
    x3, b3 = _lift3(x), _lift3(b)
    for n, m in zip(x3.shape, b3.shape):
        if n % m != 0:
            raise DimensionError(f"kernel extents {b.shape} do not divide {x.shape}")
    od, op, oq = (n // m for n, m in zip(x3.shape, b3.shape))
    x6 = x3.reshape((od, b3.shape[0], op, b3.shape[1], oq, b3.shape[2]), order="F")
    out = np.einsum("aubvcw,uvw->abc", x6, b3)
    return out.reshape(out.shape[:ndim], order="F")


def conv_chain_eval(x, factors):
    """Collapse ``x`` to a scalar by convolving with B_1, then B_2, ..., then B_L.

    When the factor extents compose to the extents of ``x`` (required),
    this equals ``inner(x, kron_chain(factors))``; the two routes are the
    package's cross-check for the composition convention.
    """
    factors = list(factors)
    if not factors:
        raise DimensionError("factor chain must be non-empty")
    acc = _lift3(x)
    comp = [int(np.prod([_triple(np.shape(f))[m] for f in factors])) for m in range(3)]
    if tuple(comp) != acc.shape:
        raise DimensionError(f"factor extents compose to {tuple(comp)}, image has {acc.shape}")
    for f in factors:
        acc = nonoverlap_conv(acc, _lift3(f))
    return float(acc.ravel()[0])
