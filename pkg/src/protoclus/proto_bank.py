"""Per-primitive prototype sets with online assignment and momentum updates."""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceWarning, FormatError, LabelError, ShapeError
from .numerics import as_matrix, l2_normalize_rows
from .ot_assign import AssignmentPlan, build_problem, harden, solve_gcg

BANK_MAGIC = b"PBNK"
BANK_VERSION = 1
STRATEGIES = ("gcg_local", "classical_ot", "cosine")


@dataclass
class PrototypeBank:
    """Prototypes of every primitive in one branch.

    Prototypes of all primitives are stacked in ``P`` (one unit-norm row
    each); primitive ``c`` owns rows ``offsets[c] : offsets[c] + sizes[c]``.
    """

    branch: str
    P: np.ndarray
    sizes: np.ndarray
    mu: float = 0.99

    def __post_init__(self):
        self.P = as_matrix(self.P)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if self.branch not in ("attribute", "object"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if np.any(self.sizes < 1):
            raise ValueError("every primitive needs at least one prototype")
        if self.sizes.sum() != self.P.shape[0]:
            raise ShapeError(f"sizes sum to {self.sizes.sum()} but P has {self.P.shape[0]} rows")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")

    @property
    def num_primitives(self):
        return len(self.sizes)

    @property
    def dim(self):
        return self.P.shape[1]

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]])

    @property
    def uniform_k(self):
        """Common prototype count, or ``None`` for a per-primitive list."""
        return int(self.sizes[0]) if np.all(self.sizes == self.sizes[0]) else None

    def prototypes(self, c):
        start = int(self.offsets[c])
        return self.P[start:start + int(self.sizes[c])]

    def as_tensor(self):
        k = self.uniform_k
        if k is None:
            raise ShapeError("bank has a per-primitive prototype count")
        return self.P.reshape(self.num_primitives, k, self.dim)

    def copy(self):
        return PrototypeBank(self.branch, self.P.copy(), self.sizes.copy(), self.mu)


def init_bank(C, K, D, rng, branch="attribute", mu=0.99):
    """Random unit-norm prototypes; ``K`` is an int or a length-``C`` list."""
    sizes = np.full(C, K, dtype=np.int64) if np.isscalar(K) else np.asarray(K, dtype=np.int64)
    if len(sizes) != C:
        raise ShapeError(f"got {len(sizes)} prototype counts for {C} primitives")
    if C < 1 or D < 1 or np.any(sizes < 1):
        raise ValueError("C, K and D must all be >= 1")
    P = l2_normalize_rows(rng.standard_normal((int(sizes.sum()), D)))
    return PrototypeBank(branch, P, sizes, mu)


@dataclass
class BatchAssignments:
    """Hard prototype assignment of every batch sample in one branch.

    ``primitive[n]`` and ``prototype[n]`` give the positive prototype of
    sample ``n`` (prototype index local to its primitive); ``positive[n]``
    is the same prototype as a row index into ``bank.P``. Samples whose
    primitive was skipped carry -1.
    """

    primitive: np.ndarray
    prototype: np.ndarray
    positive: np.ndarray
    plans: dict = field(default_factory=dict)

    @property
    def complete(self):
        return bool(np.all(self.positive >= 0))


def _cosine_plan(P, F):
    L = harden(P @ F)
    return AssignmentPlan(L=L, hard=L.copy(), objective_trace=[])


def assign_batch(bank, F, labels, kappa=1.0, epsilon=0.05, strategy="gcg_local",
                 max_outer=10):
    """Assign every column of ``F`` to one prototype of its own primitive.

    ``strategy`` picks the assignment rule: ``gcg_local`` solves the
    coherence-regularized transport problem, ``classical_ot`` the same
    problem with ``kappa = 0`` and ``cosine`` takes the most similar
    prototype with no balancing constraint.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown clustering strategy {strategy!r}")
    F = as_matrix(F)
    labels = np.asarray(labels, dtype=np.int64)
    if F.shape[0] != bank.dim or F.shape[1] != len(labels):
        raise ShapeError(f"features {F.shape} do not match dim {bank.dim} / {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= bank.num_primitives):
        raise LabelError(f"labels must lie in [0, {bank.num_primitives})")
    if strategy == "classical_ot":
        kappa = 0.0

    n = len(labels)
    out = BatchAssignments(
        primitive=np.full(n, -1, dtype=np.int64),
        prototype=np.full(n, -1, dtype=np.int64),
        positive=np.full(n, -1, dtype=np.int64),
    )
    offsets = bank.offsets
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        P = bank.prototypes(c)
        if strategy == "cosine":
            plan = _cosine_plan(P, F[:, idx])
        else:
            plan = solve_gcg(build_problem(P, F[:, idx], kappa, epsilon), max_outer=max_outer)
        k = plan.labels
        out.plans[int(c)] = (idx, plan)
        out.primitive[idx] = c
        out.prototype[idx] = k
        out.positive[idx] = offsets[c] + k
    return out


def update_bank(bank, F, assignments):
    """Momentum update of every prototype that received at least one sample.

    Each such prototype moves toward the normalized mean of its assigned
    features, ``p <- mu * p + (1 - mu) * mean``, and is re-normalized.
    Returns a new bank; ``bank`` is left untouched.
    """
    F = as_matrix(F)
    new = bank.copy()
    if bank.mu == 1.0:
        return new
    hit = assignments.positive >= 0
    rows = assignments.positive[hit]
    feats = F[:, hit].T
    for row in np.unique(rows):
        mean = feats[rows == row].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            continue
        mean /= norm
        p = bank.mu * bank.P[row] + (1.0 - bank.mu) * mean
        pn = np.linalg.norm(p)
        new.P[row] = p / pn if pn >= 1e-12 else mean
    return new


def save_bank(bank, path):
    """Write ``bank`` in the little-endian ``PBNK`` checkpoint format."""
    k = bank.uniform_k
    header = struct.pack("<4sIIIId", BANK_MAGIC, BANK_VERSION, bank.num_primitives,
                         0 if k is None else k, bank.dim, bank.mu)
    with open(path, "wb") as fh:
        fh.write(header)
        if k is None:
            fh.write(bank.sizes.astype("<u4").tobytes())
        fh.write(bank.P.astype("<f8").tobytes())


def load_bank(path, branch="attribute"):
    with open(path, "rb") as fh:
        data = fh.read()
    head = struct.calcsize("<4sIIIId")
    if len(data) < head:
        raise FormatError(f"bank file too short for header: {len(data)} < {head} bytes", 0)
    magic, version, C, K, D, mu = struct.unpack_from("<4sIIIId", data, 0)
    if magic != BANK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}", 0)
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}", 4)
    pos = head
    if K == 0:
        need = pos + 4 * C
        if len(data) < need:
            raise FormatError(f"prototype-count list truncated: need {need} bytes, have {len(data)}", pos)
        sizes = np.frombuffer(data, dtype="<u4", count=C, offset=pos).astype(np.int64)
        pos = need
    else:
        sizes = np.full(C, K, dtype=np.int64)
    count = int(sizes.sum()) * D
    if len(data) != pos + 8 * count:
        raise FormatError(f"expected {pos + 8 * count} bytes, found {len(data)}", pos)
    P = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return PrototypeBank(branch, P.reshape(-1, D), sizes, mu)


def quiet_assign(*args, **kwargs):
    """:func:`assign_batch` with solver warnings collected instead of shown.

    Returns ``(assignments, n_warnings)``.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        result = assign_batch(*args, **kwargs)
    return result, sum(issubclass(w.category, ConvergenceWarning) for w in caught)
