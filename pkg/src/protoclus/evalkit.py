"""Closed/open-world scoring, calibration-bias sweep and feasibility calibration."""

import json
from dataclasses import dataclass, field

import numpy as np

from .encoder_model import compose_embeddings, forward
from .errors import EvalError
from .numerics import softmax_cols

POOLING = ("mean", "max")


@dataclass
class ScoreTable:
    """Per-sample scores over a candidate composition list.

    ``scores[n, j]`` is the combined score of candidate ``pairs[j]`` for
    sample ``n``; ``truth[n]`` indexes the true pair in ``pairs``. Removed
    candidates (feasibility filtering) score ``-inf``.
    """

    pairs: list
    seen_pair: np.ndarray
    scores: np.ndarray
    truth: np.ndarray
    seen_sample: np.ndarray
    attr_probs: np.ndarray = None
    obj_probs: np.ndarray = None

    def __post_init__(self):
        self.pairs = [tuple(int(x) for x in p) for p in self.pairs]
        self.seen_pair = np.asarray(self.seen_pair, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        self.seen_sample = np.asarray(self.seen_sample, dtype=bool)

    def restrict(self, keep):
        """Copy with candidates outside ``keep`` (bool mask) scored ``-inf``."""
        s = self.scores.copy()
        s[:, ~np.asarray(keep, dtype=bool)] = -np.inf
        return ScoreTable(self.pairs, self.seen_pair, s, self.truth, self.seen_sample,
                          self.attr_probs, self.obj_probs)


@dataclass
class MetricsCurve:
    curve: list
    best_seen: float
    best_unseen: float
    best_hm: float
    auc: float
    extra: dict = field(default_factory=dict)

    def report(self, world, config_hash=""):
        out = {"world": world, "best_seen": self.best_seen, "best_unseen": self.best_unseen,
               "best_hm": self.best_hm, "auc": self.auc,
               "curve": [[_json_float(b), s, u] for b, s, u in self.curve],
               "config_hash": config_hash}
        out.update(self.extra)
        return out


def _json_float(x):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


METRICS_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["world", "best_seen", "best_unseen", "best_hm", "auc", "curve", "config_hash"],
    "properties": {
        "world": {"enum": ["closed", "open"]},
        "best_seen": {"type": "number", "minimum": 0, "maximum": 1},
        "best_unseen": {"type": "number", "minimum": 0, "maximum": 1},
        "best_hm": {"type": "number", "minimum": 0, "maximum": 1},
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "curve": {"type": "array", "items": {
            "type": "array", "minItems": 3, "maxItems": 3,
            "items": [{"type": ["number", "string"]}, {"type": "number"}, {"type": "number"}]}},
        "config_hash": {"type": "string"},
        "threshold": {"type": ["number", "null"]},
    },
}


def primitive_probs(params, X, tau):
    """Attribute and object probabilities plus composition probabilities over all pairs.

    Returns ``(p_attr, p_obj, p_comp, pairs)``; ``p_comp`` is normalized over
    the full attribute x object product so that any candidate subset sees the
    same value for the same pair.
    """
    pairs = [(a, o) for a in range(params.M) for o in range(params.N_obj)]
    batch = forward(params, X)
    emb = compose_embeddings(params, pairs)
    pa = softmax_cols(emb.attr.T @ batch.fa / tau).T
    po = softmax_cols(emb.obj.T @ batch.fo / tau).T
    pc = softmax_cols(emb.comp.T @ batch.fc / tau).T
    return pa, po, pc, pairs


def combine_scores(p_comp, p_attr, p_obj, pairs):
    """Combined score ``p(c|x) + p(a|x) * p(o|x)`` for each candidate pair."""
    ai = np.array([a for a, _ in pairs], dtype=np.int64)
    oi = np.array([o for _, o in pairs], dtype=np.int64)
    return p_comp + p_attr[:, ai] * p_obj[:, oi]


def score(params, dataset, split, world, tau=0.1):
    """Score the samples of one dataset split over the world's candidate space."""
    idx = dataset.indices(split)
    pa, po, pc_all, all_pairs = primitive_probs(params, dataset.X[idx].T, tau)
    pairs = dataset.space.candidates(world)
    col = {p: i for i, p in enumerate(all_pairs)}
    pc = pc_all[:, [col[p] for p in pairs]]
    seen = set(dataset.space.seen)
    where = {p: i for i, p in enumerate(pairs)}
    truth = np.array([where[(a, o)] for a, o in zip(dataset.attr[idx], dataset.obj[idx])],
                     dtype=np.int64)
    return ScoreTable(pairs=pairs, seen_pair=np.array([p in seen for p in pairs]),
                      scores=combine_scores(pc, pa, po, pairs), truth=truth,
                      seen_sample=dataset.is_seen(idx), attr_probs=pa, obj_probs=po)


def _argmax_lex(scores, pairs):
    """Row-wise argmax; among equal scores the smallest (attr, obj) pair wins."""
    order = sorted(range(len(pairs)), key=lambda j: pairs[j])
    sub = scores[:, order]
    return np.asarray(order, dtype=np.int64)[np.argmax(sub, axis=1)]


def predict(table, bias=0.0):
    """Predicted candidate index per sample with ``bias`` added to unseen-pair scores.

    Ties go to the unseen pair over a seen pair, then to the smallest (attr, obj).
    """
    s = table.scores + np.where(table.seen_pair, 0.0, bias)[None, :]
    # an unseen pair beats a seen pair at equal score
    rank = sorted(range(len(table.pairs)), key=lambda j: (bool(table.seen_pair[j]), table.pairs[j]))
    return np.asarray(rank, dtype=np.int64)[np.argmax(s[:, rank], axis=1)]


def bias_sweep(table):
    """Seen/unseen accuracy trade-off as a bias is added to unseen-pair scores.

    For every sample the gap ``max seen-pair score - max unseen-pair score``
    is the bias at which its prediction switches from the best seen pair to
    the best unseen pair (the unseen pair wins at equality). The sweep
    visits every distinct gap plus -inf (seen pairs only) and +inf (unseen
    pairs only). AUC is the trapezoidal area under seen accuracy plotted
    against unseen accuracy.
    """
    t = table
    if not t.seen_sample.any() or t.seen_sample.all():
        raise EvalError("bias sweep needs at least one seen and one unseen test sample")
    if not t.seen_pair.any() or t.seen_pair.all():
        raise EvalError("candidate space needs both seen and unseen pairs")
    seen_cols = np.flatnonzero(t.seen_pair)
    unseen_cols = np.flatnonzero(~t.seen_pair)
    pairs_s = [t.pairs[j] for j in seen_cols]
    pairs_u = [t.pairs[j] for j in unseen_cols]
    best_s = seen_cols[_argmax_lex(t.scores[:, seen_cols], pairs_s)]
    best_u = unseen_cols[_argmax_lex(t.scores[:, unseen_cols], pairs_u)]
    rows = np.arange(len(t.truth))
    max_s = t.scores[rows, best_s]
    max_u = t.scores[rows, best_u]
    with np.errstate(invalid="ignore"):
        gap = max_s - max_u
    # a side with every candidate removed can never win
    gap = np.where(np.isneginf(max_u), np.inf, gap)
    gap = np.where(np.isneginf(max_s), -np.inf, gap)
    gap = np.where(np.isneginf(max_s) & np.isneginf(max_u), np.inf, gap)

    finite = np.unique(gap[np.isfinite(gap)])
    biases = np.concatenate([[-np.inf], finite, [np.inf]])
    hit_s = best_s == t.truth
    hit_u = best_u == t.truth
    s_mask = t.seen_sample
    u_mask = ~t.seen_sample
    curve = []
    for b in biases:
        if np.isneginf(b):
            use_u = np.isneginf(gap)
        elif np.isposinf(b):
            use_u = ~np.isposinf(gap)
        else:
            use_u = b >= gap
        correct = np.where(use_u, hit_u, hit_s)
        curve.append((float(b), float(correct[s_mask].mean()), float(correct[u_mask].mean())))
    s_acc = np.array([c[1] for c in curve])
    u_acc = np.array([c[2] for c in curve])
    with np.errstate(invalid="ignore", divide="ignore"):
        hm = np.where(s_acc + u_acc > 0, 2 * s_acc * u_acc / (s_acc + u_acc), 0.0)
    auc = float(np.trapezoid(s_acc, u_acc))
    return MetricsCurve(curve=curve, best_seen=float(s_acc.max()), best_unseen=float(u_acc.max()),
                        best_hm=float(hm.max()), auc=auc)


def _cos(E):
    En = E / np.linalg.norm(E, axis=0, keepdims=True)
    return En.T @ En


def feasibility_scores(attr_embeds, obj_embeds, space, pooling="mean"):
    """Feasibility of every open-world pair from primitive-embedding similarity.

    For pair ``(a, o)`` the object score is the best cosine between ``o``
    and any object seen with ``a``; the attribute score is the best cosine
    between ``a`` and any attribute seen with ``o``. Empty co-occurrence
    sets score -1. Returns an ``num_attrs x num_objs`` array.
    """
    if pooling not in POOLING:
        raise ValueError(f"pooling must be one of {POOLING}")
    A, O = space.num_attrs, space.num_objs
    co = np.zeros((A, O), dtype=bool)
    for a, o in space.seen:
        co[a, o] = True
    so = _cos(np.asarray(obj_embeds, dtype=np.float64))
    sa = _cos(np.asarray(attr_embeds, dtype=np.float64))
    rho_o = np.full((A, O), -1.0)
    rho_a = np.full((A, O), -1.0)
    for a in range(A):
        objs = np.flatnonzero(co[a])
        if objs.size:
            rho_o[a] = so[:, objs].max(axis=1)
    for o in range(O):
        atts = np.flatnonzero(co[:, o])
        if atts.size:
            rho_a[:, o] = sa[:, atts].max(axis=1)
    if pooling == "mean":
        return 0.5 * (rho_a + rho_o)
    return np.maximum(rho_a, rho_o)


def feasibility_filter(attr_embeds, obj_embeds, space, threshold, pooling="mean"):
    """Open-world pairs kept at ``threshold``: seen pairs plus pairs with feasibility above it."""
    rho = feasibility_scores(attr_embeds, obj_embeds, space, pooling)
    seen = set(space.seen)
    return [(a, o) for a, o in space.open if (a, o) in seen or rho[a, o] > threshold]


def threshold_grid(rho, n=21):
    """Evenly spaced thresholds whose lowest value keeps every pair."""
    lo, hi = float(np.min(rho)), float(np.max(rho))
    return np.linspace(lo - 1e-9, hi, n)


def calibrate_threshold(val_table, rho, pooling_grid=21):
    """Pick the threshold maximizing validation AUC (ties keep the loosest filter)."""
    best_t, best_auc = None, -np.inf
    for T in threshold_grid(rho, pooling_grid):
        keep = np.array([seen or rho[a, o] > T
                         for (a, o), seen in zip(val_table.pairs, val_table.seen_pair)])
        auc = bias_sweep(val_table.restrict(keep)).auc
        if auc > best_auc + 1e-12:
            best_t, best_auc = float(T), auc
    return best_t, best_auc


def evaluate(params, dataset, world, calibration=True, tau=0.1, pooling="mean", split="test"):
    """Metrics on ``split`` for one world; open world optionally feasibility-calibrated."""
    table = score(params, dataset, split, world, tau)
    threshold = None
    if world == "open" and calibration:
        emb = compose_embeddings(params, [])
        rho = feasibility_scores(emb.attr, emb.obj, dataset.space, pooling)
        val = score(params, dataset, "val", "open", tau)
        threshold, _ = calibrate_threshold(val, rho)
        keep = np.array([seen or rho[a, o] > threshold
                         for (a, o), seen in zip(table.pairs, table.seen_pair)])
        table = table.restrict(keep)
    metrics = bias_sweep(table)
    if world == "open":
        metrics.extra["threshold"] = threshold
    return metrics


def dump_metrics(metrics, world, config_hash, path=None):
    text = json.dumps(metrics.report(world, config_hash), sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text
