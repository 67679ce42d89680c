"""Training objectives and their analytic gradients.

All feature and embedding matrices hold one unit-norm vector per column.
Gradients are taken w.r.t. those normalized vectors; the encoder chains
them through its own normalization layers. Prototypes are constants.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, LabelError, SampleCountError, ShapeError
from .numerics import as_matrix


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 1.0
    lambda_o: float = 1.0
    lambda_c: float = 1.0
    alpha: float = 0.2
    beta: float = 0.5
    tau: float = 0.1
    tau_cls: float = 0.1

    def __post_init__(self):
        for name in ("lambda_a", "lambda_o", "lambda_c", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0 or self.tau_cls <= 0:
            raise ValueError("temperatures must be > 0")


@dataclass
class LossReport:
    l_bas: float = 0.0
    l_a: float = 0.0
    l_o: float = 0.0
    l_c: float = 0.0
    l_pcl: float = 0.0
    l_pdl: float = 0.0
    total: float = 0.0
    grads: dict = field(default_factory=dict)


def _softmax_ce(logits, labels):
    """Mean cross-entropy of column-wise softmax and its logit gradient."""
    n = logits.shape[1]
    cols = np.arange(n)
    shifted = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=0))
    loss = float(np.mean(lse - shifted[labels, cols]))
    d = np.exp(shifted - lse[None, :])
    d[labels, cols] -= 1.0
    return loss, d / n


def branch_ce(features, class_embeds, labels, tau):
    """Softmax cross-entropy over cosine logits ``e_c . f / tau``.

    Returns ``(loss, grad_features, grad_class_embeds)``.
    """
    F = as_matrix(features)
    E = as_matrix(class_embeds)
    labels = np.asarray(labels, dtype=np.int64)
    if F.shape[0] != E.shape[0] or F.shape[1] != len(labels):
        raise ShapeError(f"features {F.shape}, embeddings {E.shape}, {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= E.shape[1]):
        raise LabelError(f"class labels must lie in [0, {E.shape[1]})")
    loss, d = _softmax_ce(E.T @ F / tau, labels)
    return loss, (E @ d) / tau, (F @ d.T) / tau


def three_path_loss(batch, emb, weights):
    """Weighted attribute, object and composition cross-entropies."""
    rep = LossReport()
    rep.l_a, g_fa, g_ta = branch_ce(batch.fa, emb.attr, batch.attr, weights.tau_cls)
    rep.l_o, g_fo, g_to = branch_ce(batch.fo, emb.obj, batch.obj, weights.tau_cls)
    rep.l_c, g_fc, g_tc = branch_ce(batch.fc, emb.comp, batch.comp, weights.tau_cls)
    rep.l_bas = weights.lambda_a * rep.l_a + weights.lambda_o * rep.l_o + weights.lambda_c * rep.l_c
    rep.total = rep.l_bas
    rep.grads = {
        "fa": weights.lambda_a * g_fa,
        "fo": weights.lambda_o * g_fo,
        "fc": weights.lambda_c * g_fc,
        "ta": weights.lambda_a * g_ta,
        "to": weights.lambda_o * g_to,
        "tc": weights.lambda_c * g_tc,
    }
    return rep


def pcl_loss(features, positives, all_prototypes, tau):
    """Prototype contrastive loss.

    Every feature column is scored against all prototype rows; the loss
    is the mean negative log-probability of its own positive prototype.

    Returns ``(loss, grad_features)``.
    """
    F = as_matrix(features)
    P = as_matrix(all_prototypes)
    positives = np.asarray(positives, dtype=np.int64)
    if len(positives) != F.shape[1]:
        raise ShapeError(f"{len(positives)} positives for {F.shape[1]} features")
    if positives.size and (positives.min() < 0 or positives.max() >= P.shape[0]):
        raise ConsistencyError("positive prototype missing from the prototype set")
    loss, d = _softmax_ce(P @ F / tau, positives)
    return loss, (P.T @ d) / tau


def _pairwise(X):
    diff = X[:, None, :] - X[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return diff, sq


def _median_bandwidth(sq):
    """Median pairwise distance and the pair(s) that define it."""
    n = sq.shape[0]
    iu, ju = np.triu_indices(n, 1)
    dist = np.sqrt(sq[iu, ju])
    order = np.argsort(dist, kind="stable")
    m = len(dist)
    mid = [order[m // 2]] if m % 2 else [order[m // 2 - 1], order[m // 2]]
    sigma = float(np.mean(dist[mid]))
    pairs = [(iu[k], ju[k], dist[k]) for k in mid]
    if sigma == 0.0:
        return 1.0, []
    return sigma, pairs


def _centered(M):
    return M - M.mean(axis=0, keepdims=True) - M.mean(axis=1, keepdims=True) + M.mean()


def _rbf(X):
    diff, sq = _pairwise(X)
    sigma, pairs = _median_bandwidth(sq)
    return np.exp(-sq / (2.0 * sigma ** 2)), diff, sq, sigma, pairs


def _check_samples(X, Y):
    X = as_matrix(X)
    Y = as_matrix(Y)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"sample counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise SampleCountError("HSIC needs at least two samples")
    return X, Y


def hsic(X, Y):
    """Biased HSIC estimate with Gaussian kernels (median-distance bandwidth).

    ``X`` and ``Y`` hold one sample per row.
    """
    X, Y = _check_samples(X, Y)
    n = X.shape[0]
    Kx = _rbf(X)[0]
    Ly = _rbf(Y)[0]
    # tr(K H L H) = <HKH, HLH>; centering both makes constant inputs give exactly 0
    return float(np.sum(_centered(Kx) * _centered(Ly)) / (n - 1) ** 2)


def hsic_grad(X, Y):
    """Gradient of :func:`hsic` w.r.t. ``X``, including the bandwidth's dependence on ``X``."""
    X, Y = _check_samples(X, Y)
    n = X.shape[0]
    Kx, diff, sq, sigma, pairs = _rbf(X)
    W = Kx * _centered(_rbf(Y)[0]) / (n - 1) ** 2
    grad = -(2.0 / sigma ** 2) * np.einsum("ij,ijk->ik", W, diff)
    if pairs:
        coef = float(np.sum(W * sq)) / sigma ** 3 / len(pairs)
        for i, j, d in pairs:
            step = coef * diff[i, j] / d
            grad[i] += step
            grad[j] -= step
    return grad


def pdl_loss(f_attr, p_obj, f_obj, p_attr):
    """Decorrelation of each branch's features from the other branch's prototypes.

    Arguments hold one vector per column (sample). Either pair may be
    ``None`` to drop that term. Returns ``(loss, grad_f_attr, grad_f_obj)``
    with ``None`` for a dropped term's gradient.
    """
    loss = 0.0
    g_fa = g_fo = None
    for f, p, slot in ((f_attr, p_obj, "a"), (f_obj, p_attr, "o")):
        if f is None and p is None:
            continue
        if f is None or p is None:
            raise ConsistencyError("a decorrelation term is missing its prototype assignment")
        X = as_matrix(f).T
        Y = as_matrix(p).T
        loss += hsic(X, Y)
        g = hsic_grad(X, Y).T
        if slot == "a":
            g_fa = g
        else:
            g_fo = g
    return loss, g_fa, g_fo


def total_loss(batch, emb, banks, assignments, weights):
    """Full objective ``L_bas + alpha * L_pcl + beta * L_pdl``.

    ``banks`` and ``assignments`` map ``"attribute"`` / ``"object"`` to a
    prototype bank and its batch assignment; a missing branch contributes
    no prototype terms.
    """
    rep = three_path_loss(batch, emb, weights)
    g = rep.grads
    active = [b for b in ("attribute", "object") if banks.get(b) is not None]
    for b in active:
        if b not in assignments or not assignments[b].complete:
            raise ConsistencyError(f"{b} branch has samples without an assigned prototype")

    if active:
        feats, pos, protos = [], [], []
        shift = 0
        for b in active:
            feats.append(batch.fa if b == "attribute" else batch.fo)
            pos.append(assignments[b].positive + shift)
            protos.append(banks[b].P)
            shift += banks[b].P.shape[0]
        F = np.hstack(feats)
        rep.l_pcl, g_pcl = pcl_loss(F, np.concatenate(pos), np.vstack(protos), weights.tau)
        if weights.alpha:
            n = batch.size
            for k, b in enumerate(active):
                key = "fa" if b == "attribute" else "fo"
                g[key] = g[key] + weights.alpha * g_pcl[:, k * n:(k + 1) * n]

        p_obj = p_attr = f_a = f_o = None
        if "object" in active:
            p_obj = banks["object"].P[assignments["object"].positive].T
            f_a = batch.fa
        if "attribute" in active:
            p_attr = banks["attribute"].P[assignments["attribute"].positive].T
            f_o = batch.fo
        rep.l_pdl, g_fa, g_fo = pdl_loss(f_a, p_obj, f_o, p_attr)
        if weights.beta:
            if g_fa is not None:
                g["fa"] = g["fa"] + weights.beta * g_fa
            if g_fo is not None:
                g["fo"] = g["fo"] + weights.beta * g_fo

    rep.total = rep.l_bas + weights.alpha * rep.l_pcl + weights.beta * rep.l_pdl
    return rep
