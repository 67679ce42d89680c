"""Seeded synthetic compositional datasets.

Every attribute owns ``modes_per_primitive`` latent directions, and so does
every object. A sample of composition ``(a, o)`` is

    x = u[a, k_a] + v[o, k_o] + noise,

where the attribute mode ``k_a`` is a fixed function of the pair (the same
attribute looks different on different objects) and the object mode
``k_o`` is drawn per sample. With ``num_families > 1`` attributes and
objects are split into families, only same-family pairs exist, and
primitives of one family share part of their direction; the pairs left out
of the Cartesian product are the infeasible ones of the open world.
"""

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, SplitError
from .numerics import Rng, l2_normalize_rows

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenSpec:
    M: int = 6
    N_obj: int = 6
    modes_per_primitive: int = 3
    D_raw: int = 24
    samples_per_composition: int = 40
    unseen_fraction: float = 0.3
    noise_sigma: float = 0.15
    seed: int = 0
    num_families: int = 1
    # weight of the shared per-primitive direction inside each mode direction
    mode_spread: float = 1.0
    # weight of the shared family direction inside each primitive direction
    family_weight: float = 0.5

    def __post_init__(self):
        if self.M < 1 or self.N_obj < 1 or self.modes_per_primitive < 1 or self.D_raw < 1:
            raise ValueError("M, N_obj, modes_per_primitive and D_raw must be >= 1")
        if self.samples_per_composition < 1:
            raise ValueError("samples_per_composition must be >= 1")
        if not 0.0 <= self.unseen_fraction < 1.0:
            raise ValueError("unseen_fraction must lie in [0, 1)")
        if self.num_families < 1 or self.num_families > min(self.M, self.N_obj):
            raise ValueError("num_families must lie in [1, min(M, N_obj)]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GenSpec field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class CompositionSpace:
    """Attribute/object vocabulary and the seen/unseen composition split."""

    num_attrs: int
    num_objs: int
    seen: list
    unseen: list

    def __post_init__(self):
        self.seen = sorted(tuple(int(x) for x in p) for p in self.seen)
        self.unseen = sorted(tuple(int(x) for x in p) for p in self.unseen)

    @property
    def closed(self):
        return sorted(self.seen + self.unseen)

    @property
    def open(self):
        return [(a, o) for a in range(self.num_attrs) for o in range(self.num_objs)]

    def candidates(self, world):
        if world == "closed":
            return self.closed
        if world == "open":
            return self.open
        raise ValueError(f"unknown world {world!r}")

    def to_dict(self):
        return {"num_attrs": self.num_attrs, "num_objs": self.num_objs,
                "seen": [list(p) for p in self.seen], "unseen": [list(p) for p in self.unseen]}


@dataclass
class Dataset:
    spec: GenSpec
    space: CompositionSpace
    X: np.ndarray
    attr: np.ndarray
    obj: np.ndarray
    mode_a: np.ndarray
    mode_o: np.ndarray
    split: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_samples(self):
        return self.X.shape[0]

    def indices(self, name):
        return np.flatnonzero(self.split == SPLITS.index(name))

    def is_seen(self, idx=None):
        seen = set(self.space.seen)
        sel = slice(None) if idx is None else idx
        return np.array([(a, o) in seen for a, o in zip(self.attr[sel], self.obj[sel])], dtype=bool)

    def equals(self, other):
        return (self.spec == other.spec and self.space.to_dict() == other.space.to_dict()
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("X", "attr", "obj", "mode_a", "mode_o", "split")))


def family_of(i, num_families):
    return i % num_families


def composition_set(spec):
    return [(a, o) for a in range(spec.M) for o in range(spec.N_obj)
            if family_of(a, spec.num_families) == family_of(o, spec.num_families)]


def _directions(rng, count, modes, fam_dirs, fam_index, spec):
    D = spec.D_raw
    out = np.empty((count, modes, D))
    for p in range(count):
        center = rng.standard_normal(D)
        center /= np.linalg.norm(center)
        if spec.num_families > 1:
            center = center + spec.family_weight * fam_dirs[fam_index(p)]
            center /= np.linalg.norm(center)
        offsets = l2_normalize_rows(rng.standard_normal((modes, D)))
        out[p] = l2_normalize_rows(center[None, :] + spec.mode_spread * offsets)
    return out


def _split_compositions(comps, spec, rng, amode):
    """Seen/unseen split in which every primitive stays seen.

    Compositions are moved to the unseen side in a random order, skipping any
    move that would strand a primitive. A first pass also keeps every
    attribute mode seen; when that cannot reach the requested unseen count a
    second pass over the same order relaxes it.
    """
    n_unseen = min(int(round(spec.unseen_fraction * len(comps))), len(comps) - 1)
    for _ in range(100):
        seen = set(comps)
        unseen = []
        attr_n = {a: sum(1 for aa, _ in comps if aa == a) for a in range(spec.M)}
        obj_n = {o: sum(1 for _, oo in comps if oo == o) for o in range(spec.N_obj)}
        mode_n = {}
        for a, o in comps:
            mode_n[(a, amode[(a, o)])] = mode_n.get((a, amode[(a, o)]), 0) + 1
        order = rng.permutation(len(comps))
        for keep_modes in (True, False):
            for i in order:
                if len(unseen) == n_unseen:
                    break
                a, o = comps[i]
                mode = (a, amode[(a, o)])
                if (a, o) not in seen or attr_n[a] < 2 or obj_n[o] < 2:
                    continue
                if keep_modes and mode_n[mode] < 2:
                    continue
                seen.discard((a, o))
                unseen.append((a, o))
                attr_n[a] -= 1
                obj_n[o] -= 1
                mode_n[mode] -= 1
        if len(unseen) == n_unseen:
            return sorted(seen), sorted(unseen)
    raise SplitError("could not place every primitive in a seen composition after 100 reshuffles")


def _attr_modes(spec, comps, rng):
    """Mode of attribute ``a`` on object ``o``: a seeded balanced map over each attribute's objects."""
    table = {}
    for a in range(spec.M):
        objs = [o for aa, o in comps if aa == a]
        for rank, i in enumerate(rng.permutation(len(objs))):
            table[(a, objs[i])] = rank % spec.modes_per_primitive
    return table


def generate(spec):
    """Build a seeded dataset from ``spec`` (see module docstring)."""
    root = Rng(spec.seed)
    comps = composition_set(spec)
    amode = _attr_modes(spec, comps, root.child("modes"))
    seen, unseen = _split_compositions(comps, spec, root.child("split"), amode)
    space = CompositionSpace(spec.M, spec.N_obj, seen, unseen)

    geo = root.child("geometry")
    fam_dirs = l2_normalize_rows(geo.standard_normal((spec.num_families, spec.D_raw)))
    K = spec.modes_per_primitive
    U = _directions(geo, spec.M, K, fam_dirs, lambda a: family_of(a, spec.num_families), spec)
    V = _directions(geo, spec.N_obj, K, fam_dirs, lambda o: family_of(o, spec.num_families), spec)

    unseen_set = set(space.unseen)
    n = spec.samples_per_composition
    X, attr, obj, ma, mo, split = [], [], [], [], [], []
    for a, o in comps:
        # one sub-stream per composition keeps generation order-independent
        r = root.child("samples").child(a * spec.N_obj + o)
        k_o = r.permutation(np.arange(n) % K)
        k_a = np.full(n, amode[(a, o)])
        X.append(U[a, k_a] + V[o, k_o] + spec.noise_sigma * r.standard_normal((n, spec.D_raw)))
        attr.append(np.full(n, a))
        obj.append(np.full(n, o))
        ma.append(k_a)
        mo.append(k_o)
        s = np.empty(n, dtype=np.int64)
        order = r.permutation(n)
        if (a, o) in unseen_set:
            n_val = int(round(n / 3))
            s[order[:n_val]] = 1
            s[order[n_val:]] = 2
        else:
            n_tr = int(round(0.7 * n))
            n_val = int(round(0.1 * n))
            s[order[:n_tr]] = 0
            s[order[n_tr:n_tr + n_val]] = 1
            s[order[n_tr + n_val:]] = 2
        split.append(s)
    cat = np.concatenate
    return Dataset(spec, space, np.vstack(X), cat(attr).astype(np.int64), cat(obj).astype(np.int64),
                   cat(ma).astype(np.int64), cat(mo).astype(np.int64), cat(split).astype(np.int64))


def _digest(b):
    return hashlib.sha256(b).hexdigest()


def _meta_checksum(meta):
    body = {k: v for k, v in meta.items() if k != "checksum"}
    return _digest(json.dumps(body, sort_keys=True, separators=(",", ":")).encode())


def save(ds, directory):
    """Write ``meta.json``, ``features.f64`` and ``labels.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    feats = np.ascontiguousarray(ds.X, dtype="<f8").tobytes()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "attr_id", "obj_id", "mode_a", "mode_o", "split"])
    for i in range(ds.num_samples):
        w.writerow([i, ds.attr[i], ds.obj[i], ds.mode_a[i], ds.mode_o[i], SPLITS[ds.split[i]]])
    labels = buf.getvalue().encode()
    meta = {
        "format_version": FORMAT_VERSION,
        "spec": asdict(ds.spec),
        "space": ds.space.to_dict(),
        "num_samples": int(ds.num_samples),
        "D_raw": int(ds.X.shape[1]),
        "splits": {name: ds.indices(name).tolist() for name in SPLITS},
        "features_sha256": _digest(feats),
        "labels_sha256": _digest(labels),
    }
    meta["checksum"] = _meta_checksum(meta)
    with open(os.path.join(directory, "features.f64"), "wb") as fh:
        fh.write(feats)
    with open(os.path.join(directory, "labels.csv"), "wb") as fh:
        fh.write(labels)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load(directory):
    """Read a dataset written by :func:`save`, verifying sizes and checksums."""
    try:
        with open(os.path.join(directory, "meta.json"), "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read meta.json: {exc}")
    try:
        meta = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"meta.json is not valid JSON: {exc.msg}", exc.pos)
    if meta.get("checksum") != _meta_checksum(meta):
        raise FormatError("meta.json checksum mismatch")
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {meta.get('format_version')}")
    n, d = meta["num_samples"], meta["D_raw"]

    with open(os.path.join(directory, "features.f64"), "rb") as fh:
        feats = fh.read()
    expected = 8 * n * d
    if len(feats) != expected:
        raise FormatError(f"features.f64 has {len(feats)} bytes, expected {expected}",
                          min(len(feats), expected))
    if _digest(feats) != meta["features_sha256"]:
        raise FormatError("features.f64 checksum mismatch", 0)
    X = np.frombuffer(feats, dtype="<f8").astype(np.float64).reshape(n, d)

    with open(os.path.join(directory, "labels.csv"), "rb") as fh:
        labels = fh.read()
    if _digest(labels) != meta["labels_sha256"]:
        raise FormatError("labels.csv checksum mismatch", 0)
    rows = list(csv.reader(io.StringIO(labels.decode())))
    if len(rows) != n + 1:
        raise FormatError(f"labels.csv has {len(rows) - 1} rows, expected {n}")
    body = rows[1:]
    try:
        cols = np.array([[int(r[1]), int(r[2]), int(r[3]), int(r[4]), SPLITS.index(r[5])]
                         for r in body], dtype=np.int64).reshape(n, 5)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed labels.csv row: {exc}")
    spec = GenSpec.from_dict(meta["spec"])
    sp = meta["space"]
    space = CompositionSpace(sp["num_attrs"], sp["num_objs"], sp["seen"], sp["unseen"])
    return Dataset(spec, space, X, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], cols[:, 4],
                   meta={"features_sha256": meta["features_sha256"]})
