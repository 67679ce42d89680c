"""Three-branch compositional encoder with hand-written backpropagation.

A linear backbone maps raw inputs to the composition feature ``f^c``; two
one-hidden-layer adapters map ``f^c`` to the attribute and object features.
Class embeddings come from learnable token tables: attribute and object
tokens directly, composition embeddings through a shared linear map of the
concatenated attribute and object tokens, so an embedding exists for every
pair, including pairs never seen in training.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceWarning, FormatError, LabelError, NonFiniteError
from .losses import LossWeights, total_loss
from .numerics import Rng, check_finite, normalize_backward
from .proto_bank import assign_batch, init_bank, update_bank
from .structures import ClassEmbeddings, FeatureBatch

PARAM_ORDER = ("Wb", "bb", "W1a", "b1a", "W2a", "b2a", "W1o", "b1o", "W2o", "b2o",
               "token_a", "token_o", "U")
MODEL_MAGIC = b"CPMD"
MODEL_VERSION = 1


@dataclass
class ModelParams:
    D_raw: int
    D: int
    M: int
    N_obj: int
    residual: bool = True
    arrays: dict = field(default_factory=dict)

    def shapes(self):
        D = self.D
        s = {"Wb": (D, self.D_raw), "bb": (D,), "token_a": (D, self.M),
             "token_o": (D, self.N_obj), "U": (D, 2 * D)}
        for br in "ao":
            s.update({f"W1{br}": (D, D), f"b1{br}": (D,), f"W2{br}": (D, D), f"b2{br}": (D,)})
        return s

    def copy(self):
        return ModelParams(self.D_raw, self.D, self.M, self.N_obj, self.residual,
                           {k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, name):
        return self.arrays[name]


def init_params(D_raw, D, M, N_obj, rng, residual=True):
    p = ModelParams(D_raw, D, M, N_obj, residual)
    shapes = p.shapes()
    a = {}
    a["Wb"] = rng.standard_normal(shapes["Wb"]) / np.sqrt(D_raw)
    a["bb"] = np.zeros(D)
    for br in "ao":
        a[f"W1{br}"] = rng.standard_normal((D, D)) / np.sqrt(D)
        a[f"b1{br}"] = np.zeros(D)
        a[f"W2{br}"] = rng.standard_normal((D, D)) / np.sqrt(D)
        a[f"b2{br}"] = np.zeros(D)
    a["token_a"] = rng.standard_normal((D, M))
    a["token_o"] = rng.standard_normal((D, N_obj))
    a["U"] = np.hstack([np.eye(D), np.eye(D)]) / np.sqrt(2) \
        + 0.1 * rng.standard_normal((D, 2 * D)) / np.sqrt(2 * D)
    p.arrays = {k: a[k] for k in PARAM_ORDER}
    return p


def _normalize_cols(Z):
    norms = np.sqrt(np.einsum("ij,ij->j", Z, Z))
    if np.any(norms < 1e-12):
        raise NonFiniteError("encountered a zero-norm vector during normalization")
    return Z / norms[None, :], norms


def forward(params, X, attr=None, obj=None, comp=None):
    """Encode raw inputs (one per column of ``X``) into normalized features."""
    X = np.asarray(X, dtype=np.float64)
    check_finite(X, "inputs")
    p = params.arrays
    z = p["Wb"] @ X + p["bb"][:, None]
    fc, zn = _normalize_cols(z)
    cache = {"X": X, "fc_norm": zn}
    out = {}
    for br in "ao":
        h = np.tanh(p[f"W1{br}"] @ fc + p[f"b1{br}"][:, None])
        y = p[f"W2{br}"] @ h + p[f"b2{br}"][:, None]
        if params.residual:
            y = y + fc
        f, yn = _normalize_cols(y)
        cache[f"h{br}"] = h
        cache[f"norm{br}"] = yn
        out[br] = f
    n = X.shape[1]
    empty = np.full(n, -1, dtype=np.int64)
    return FeatureBatch(
        fc=fc, fa=out["a"], fo=out["o"],
        attr=empty if attr is None else np.asarray(attr, dtype=np.int64),
        obj=empty if obj is None else np.asarray(obj, dtype=np.int64),
        comp=empty if comp is None else np.asarray(comp, dtype=np.int64),
        cache=cache)


def compose_embeddings(params, pairs):
    """Class embeddings for attributes, objects and the given composition pairs."""
    pairs = [(int(a), int(o)) for a, o in pairs]
    for a, o in pairs:
        if not (0 <= a < params.M and 0 <= o < params.N_obj):
            raise LabelError(f"pair ({a}, {o}) outside {params.M} x {params.N_obj}")
    p = params.arrays
    ta, na = _normalize_cols(p["token_a"])
    to, no = _normalize_cols(p["token_o"])
    ai = np.array([a for a, _ in pairs], dtype=np.int64)
    oi = np.array([o for _, o in pairs], dtype=np.int64)
    cat = np.vstack([ta[:, ai], to[:, oi]])
    tc, nc = _normalize_cols(p["U"] @ cat) if pairs else (np.zeros((params.D, 0)), np.zeros(0))
    return ClassEmbeddings(ta, to, tc, pairs,
                           cache={"na": na, "no": no, "nc": nc, "cat": cat, "ai": ai, "oi": oi})


def backward(params, batch, emb, grads):
    """Parameter gradients given loss gradients w.r.t. normalized outputs.

    ``grads`` may hold ``fc``, ``fa``, ``fo`` (features) and ``ta``, ``to``,
    ``tc`` (embeddings); missing entries count as zero.
    """
    p = params.arrays
    c = batch.cache
    out = {k: np.zeros_like(v) for k, v in p.items()}
    D = params.D

    g_fc = grads.get("fc", np.zeros_like(batch.fc)).copy()
    for br, f in (("a", batch.fa), ("o", batch.fo)):
        g = grads.get(f"f{br}")
        if g is None:
            continue
        g_y = normalize_backward(f, c[f"norm{br}"], g)
        h = c[f"h{br}"]
        out[f"W2{br}"] += g_y @ h.T
        out[f"b2{br}"] += g_y.sum(axis=1)
        g_pre = (p[f"W2{br}"].T @ g_y) * (1.0 - h * h)
        out[f"W1{br}"] += g_pre @ batch.fc.T
        out[f"b1{br}"] += g_pre.sum(axis=1)
        g_fc += p[f"W1{br}"].T @ g_pre
        if params.residual:
            g_fc += g_y
    g_z = normalize_backward(batch.fc, c["fc_norm"], g_fc)
    out["Wb"] += g_z @ c["X"].T
    out["bb"] += g_z.sum(axis=1)

    ec = emb.cache
    g_ta = grads.get("ta", np.zeros_like(emb.attr)).copy()
    g_to = grads.get("to", np.zeros_like(emb.obj)).copy()
    g_tc = grads.get("tc")
    if g_tc is not None and emb.comp.shape[1]:
        g_v = normalize_backward(emb.comp, ec["nc"], g_tc)
        out["U"] += g_v @ ec["cat"].T
        g_cat = p["U"].T @ g_v
        np.add.at(g_ta.T, ec["ai"], g_cat[:D].T)
        np.add.at(g_to.T, ec["oi"], g_cat[D:].T)
    out["token_a"] += normalize_backward(emb.attr, ec["na"], g_ta)
    out["token_o"] += normalize_backward(emb.obj, ec["no"], g_to)
    return out


@dataclass
class OptimState:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, state, grads):
    """One bias-corrected Adam step with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, w in params.arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        w -= state.lr * (update + state.weight_decay * w)
    return params


def save_model(params, path):
    """Little-endian ``CPMD`` checkpoint: header, then parameters in ``PARAM_ORDER``."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIII", MODEL_MAGIC, MODEL_VERSION, params.D_raw, params.D,
                             params.M, params.N_obj, int(params.residual)))
        for name in PARAM_ORDER:
            fh.write(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fmt = "<4sIIIIII"
    head = struct.calcsize(fmt)
    if len(data) < head:
        raise FormatError(f"model file too short for header: {len(data)} < {head} bytes", 0)
    magic, version, D_raw, D, M, N_obj, residual = struct.unpack_from(fmt, data, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    params = ModelParams(D_raw, D, M, N_obj, bool(residual))
    pos = head
    for name in PARAM_ORDER:
        shape = params.shapes()[name]
        count = int(np.prod(shape))
        if len(data) < pos + 8 * count:
            raise FormatError(f"parameter block {name} truncated", pos)
        params.arrays[name] = np.frombuffer(data, "<f8", count, pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after parameters", pos)
    return params


def loss_weights(config):
    return LossWeights(lambda_a=config.lambda_a, lambda_o=config.lambda_o,
                       lambda_c=config.lambda_c, alpha=config.effective_alpha,
                       beta=config.effective_beta, tau=config.tau, tau_cls=config.tau_cls)


def prototype_counts(config, labels, C):
    """Per-primitive prototype counts; a [k_min, k_max] range scales with training share."""
    if isinstance(config.K, int):
        return np.full(C, config.K, dtype=np.int64)
    lo, hi = config.K
    counts = np.bincount(labels, minlength=C).astype(np.float64)
    share = counts / counts.max()
    return np.clip(np.ceil(share * hi), lo, hi).astype(np.int64)


def batch_loss(params, X, attr, obj, comp, seen_pairs, banks, weights, config):
    """Forward pass, prototype assignment and loss for one batch.

    Returns ``(batch, emb, assignments, report)``.
    """
    batch = forward(params, X, attr, obj, comp)
    emb = compose_embeddings(params, seen_pairs)
    assignments = {}
    for br, bank in banks.items():
        feats = batch.fa if br == "attribute" else batch.fo
        labels = batch.attr if br == "attribute" else batch.obj
        assignments[br] = assign_batch(bank, feats, labels, config.kappa, config.epsilon,
                                       config.clustering_strategy, config.max_outer)
    report = total_loss(batch, emb, banks, assignments, weights)
    return batch, emb, assignments, report


@dataclass
class TrainResult:
    params: ModelParams
    banks: dict
    log: list


def train(config, dataset, rng=None, eval_fn=None):
    """Alternate encoder updates with prototype assignment and momentum updates.

    ``eval_fn(params)``, if given, is called after every epoch and its return
    value stored as ``val_auc`` in the log.
    """
    rng = Rng(config.seed) if rng is None else rng
    tr = dataset.indices("train")
    seen_pairs = dataset.space.seen
    pair_index = {p: i for i, p in enumerate(seen_pairs)}
    comp = np.array([pair_index[(a, o)] for a, o in zip(dataset.attr[tr], dataset.obj[tr])])
    params = init_params(dataset.X.shape[1], config.embed_dim, dataset.space.num_attrs,
                         dataset.space.num_objs, rng.child("init"), config.residual)
    banks = {}
    if config.clustering_active:
        for br in config.branches:
            C = dataset.space.num_attrs if br == "attribute" else dataset.space.num_objs
            labels = dataset.attr[tr] if br == "attribute" else dataset.obj[tr]
            banks[br] = init_bank(C, prototype_counts(config, labels, C), config.embed_dim,
                                  rng.child(f"bank-{br}"), branch=br, mu=config.mu)
    state = OptimState(lr=config.lr, weight_decay=config.weight_decay)
    weights = loss_weights(config)
    batching = rng.child("batching")
    log = []
    for epoch in range(config.epochs):
        order = batching.permutation(len(tr))
        sums = {"l_bas": 0.0, "l_pcl": 0.0, "l_pdl": 0.0, "total": 0.0}
        n_batches = 0
        n_warn = 0
        for start in range(0, len(order), config.batch_size):
            sel = order[start:start + config.batch_size]
            if len(sel) < 2:
                continue
            idx = tr[sel]
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConvergenceWarning)
                batch, emb, assignments, rep = batch_loss(
                    params, dataset.X[idx].T, dataset.attr[idx], dataset.obj[idx], comp[sel],
                    seen_pairs, banks, weights, config)
            n_warn += sum(issubclass(w.category, ConvergenceWarning) for w in caught)
            if not np.isfinite(rep.total):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            optimizer_step(params, state, backward(params, batch, emb, rep.grads))
            for br in banks:
                feats = batch.fa if br == "attribute" else batch.fo
                banks[br] = update_bank(banks[br], feats, assignments[br])
            for k in sums:
                sums[k] += getattr(rep, k)
            n_batches += 1
        entry = {"epoch": epoch + 1}
        entry.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        entry["solver_warnings"] = n_warn
        if eval_fn is not None:
            entry["val_auc"] = eval_fn(params)
        log.append(entry)
    return TrainResult(params, banks, log)
