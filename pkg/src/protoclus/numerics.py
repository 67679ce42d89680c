"""Dense matrix kernels and gradient-checking helpers.

Matrices are plain 2-D ``float64`` numpy arrays. Every public function
returns a fresh array and leaves its inputs untouched.
"""

import zlib

import numpy as np

from .errors import NonFiniteError, ZeroVectorError

NORM_FLOOR = 1e-12


def as_matrix(m):
    """Return ``m`` as a 2-D float64 array (copying only when needed)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(m, what="input"):
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{what} contains non-finite entries")


def l2_normalize_rows(m):
    """Scale every row of ``m`` to unit Euclidean norm.

    Raises
    ------
    ZeroVectorError
        If some row has norm below 1e-12.
    """
    m = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise ZeroVectorError(f"row {int(bad[0])} has (near-)zero norm")
    return m / norms[:, None]


def l2_normalize_cols(m):
    return l2_normalize_rows(as_matrix(m).T).T


def normalize_backward(unit, norms, grad_unit):
    """Pull a gradient back through column-wise ``x -> x / |x|``.

    ``unit`` holds the normalized columns, ``norms`` the pre-normalization
    column norms and ``grad_unit`` the gradient w.r.t. ``unit``.
    """
    proj = np.einsum("ij,ij->j", unit, grad_unit)
    return (grad_unit - unit * proj[None, :]) / norms[None, :]


def logsumexp_cols(m):
    mx = m.max(axis=0)
    return mx + np.log(np.exp(m - mx[None, :]).sum(axis=0))


def softmax_cols(m):
    """Column-wise softmax with max-subtraction.

    Raises
    ------
    NonFiniteError
        If ``m`` has NaN or infinite entries.
    """
    m = as_matrix(m)
    check_finite(m)
    e = np.exp(m - m.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of a matrix."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    """Max-norm relative error between two arrays, guarded for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


class Rng:
    """Seeded random source with named, independent sub-streams.

    Draws come from numpy's PCG64 bit generator. Sub-streams are derived
    through ``SeedSequence`` spawn keys, using the CRC-32 of the stream
    name, so ``Rng(7).child("data")`` is the same stream on every platform.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def child(self, name):
        if isinstance(name, str):
            name = zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, self._key + (int(name),))

    def __getattr__(self, attr):
        # delegate draws (normal, integers, permutation, ...) to the generator
        return getattr(self.generator, attr)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"
