"""
Evaluation protocol: dimensional alignment, linear probing, k-means based
forget identifiability (F1, NMI), accuracy, confidence-based membership
inference and backdoor attack success rate.

All metrics are pure functions of model snapshots and data.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Union

import numpy as np
from sklearn.metrics import normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from unlearnlab import config
from unlearnlab.datagen import forget_test_mask
from unlearnlab.errors import (
    AllZero,
    DegenerateForgetFeatures,
    DegenerateMask,
    DegenerateRetainFeatures,
    EmptyForgetSet,
    ShapeMismatch,
    SingleClassTrainingSet,
    TooFewSamples,
    ZeroEntropy,
)
from unlearnlab.linalg import as_matrix, frobenius_norm, principal_projector
from unlearnlab.models.data_bundle import DataBundle
from unlearnlab.models.mlp import MlpModel
from unlearnlab.models.report import MetricsReport
from unlearnlab.nnet import check_labels, forward
from unlearnlab.unified_logger import log_eval, log_warning

logger = logging.getLogger(__name__)

DEGENERATE_FEATURE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Dimensional alignment
# ---------------------------------------------------------------------------

def dimensional_alignment(f_forget: np.ndarray, f_retain: np.ndarray) -> float:
    """
    ||F_f F_f^T U_k U_k^T||_F / ||F_f F_f^T||_F for C x n feature matrices.

    U_k spans the top-k eigenvectors of the uncentered retain covariance with
    k = ceil(effective rank).
    """
    ff = as_matrix(f_forget)
    fr = as_matrix(f_retain)
    if ff.shape[0] != fr.shape[0]:
        raise ShapeMismatch(f"feature dims differ: {ff.shape[0]} vs {fr.shape[0]}")
    if ff.shape[1] == 0:
        raise DegenerateForgetFeatures("forget feature matrix is empty")
    if fr.shape[1] == 0:
        raise DegenerateRetainFeatures("retain feature matrix is empty")

    covariance = ff @ ff.T
    denominator = frobenius_norm(covariance)
    if denominator < DEGENERATE_FEATURE_TOL:
        raise DegenerateForgetFeatures(f"||F_f F_f^T||_F = {denominator:.3e}")
    try:
        projector, _, _ = principal_projector(fr)
    except AllZero as e:
        raise DegenerateRetainFeatures("retain feature covariance is all zero") from e
    return float(min(frobenius_norm(covariance @ projector) / denominator, 1.0))


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    steps: int = config.PROBE_STEPS
    learning_rate: float = config.PROBE_LEARNING_RATE
    seed: int = 0


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(train_features: np.ndarray, train_labels: np.ndarray,
                 eval_features: np.ndarray, eval_labels: np.ndarray,
                 probe_cfg: Optional[ProbeConfig] = None, num_classes: Optional[int] = None) -> float:
    """
    Accuracy of a multinomial logistic probe trained on frozen features.

    Features are standardised with train statistics; the probe is trained by
    full-batch gradient descent without weight decay.
    """
    cfg = probe_cfg or ProbeConfig()
    xtr = np.asarray(train_features, dtype=np.float64)
    xev = np.asarray(eval_features, dtype=np.float64)
    if xtr.ndim != 2 or xev.ndim != 2 or xtr.shape[1] != xev.shape[1]:
        raise ShapeMismatch(f"probe feature shapes {xtr.shape} and {xev.shape}")
    if xev.shape[0] == 0:
        raise TooFewSamples("probe evaluation set is empty")
    ytr = np.asarray(train_labels, dtype=np.int64)
    yev = np.asarray(eval_labels, dtype=np.int64)
    if np.unique(ytr).size < 2:
        raise SingleClassTrainingSet("probe training set holds a single class")
    k = int(num_classes) if num_classes is not None else int(max(ytr.max(), yev.max())) + 1
    ytr = check_labels(ytr, k)
    yev = check_labels(yev, k)

    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0)
    sd[sd == 0.0] = 1.0
    xtr = (xtr - mu) / sd
    xev = (xev - mu) / sd

    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 0.01, size=(xtr.shape[1], k))
    b = np.zeros(k)
    onehot = np.eye(k)[ytr]
    n = xtr.shape[0]
    for _ in range(cfg.steps):
        residual = (_softmax(xtr @ w + b) - onehot) / n
        w -= cfg.learning_rate * (xtr.T @ residual)
        b -= cfg.learning_rate * residual.sum(axis=0)

    predictions = np.argmax(xev @ w + b, axis=1)
    return float(np.mean(predictions == yev))


# ---------------------------------------------------------------------------
# k-means, NMI, F1
# ---------------------------------------------------------------------------

@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    iterations: int = 0


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkc,nkc->nk", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_distances(x, x[[idx]])[:, 0])
    return x[chosen].copy()


def kmeans(features: np.ndarray, k: int, seed: int, max_iter: int = config.KMEANS_MAX_ITER) -> ClusterAssignment:
    """Seeded k-means++ then Lloyd iterations until the assignment stops changing."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise TooFewSamples(f"k-means needs n >= k >= 1 (n={n}, k={k})")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    distances = _sq_distances(x, centroids)
    labels = np.argmin(distances, axis=1)
    history = [float(distances[np.arange(n), labels].sum())]

    iterations = 0
    for iterations in range(1, max_iter + 1):
        updated = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                updated[c] = x[members].mean(axis=0)
        for c in range(k):
            if not np.any(labels == c):
                # leere Cluster: auf den Punkt mit dem größten Abstand zu seinem Zentrum setzen
                own = _sq_distances(x, updated)[np.arange(n), labels]
                far = int(np.argmax(own))
                updated[c] = x[far]
                labels[far] = c
        distances = _sq_distances(x, updated)
        new_labels = np.argmin(distances, axis=1)
        centroids = updated
        history.append(float(distances[np.arange(n), new_labels].sum()))
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break

    logger.debug(f"kmeans k={k}: {iterations} iterations, inertia={history[-1]:.4f}")
    return ClusterAssignment(labels=labels, centroids=centroids, inertia=history[-1],
                             inertia_history=history, iterations=iterations)


ClusterIds = Union[ClusterAssignment, np.ndarray]


def _ids(assignment: ClusterIds) -> np.ndarray:
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else assignment
    return np.asarray(labels, dtype=np.int64)


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi_forget(assignment: ClusterIds, forget_mask: np.ndarray) -> float:
    """I(K; X) / min(H(K), H(X)) between cluster ids and forget membership."""
    ids = _ids(assignment)
    mask = np.asarray(forget_mask, dtype=bool)
    if ids.shape != mask.shape:
        raise ShapeMismatch("cluster ids and mask differ in length")
    if mask.all() or not mask.any():
        raise DegenerateMask("forget mask is constant")
    if _entropy(ids) == 0.0:
        raise ZeroEntropy("all samples fall into one cluster")
    score = normalized_mutual_info_score(mask.astype(np.int64), ids, average_method="min")
    return float(min(max(score, 0.0), 1.0))


def f1_forget(assignment: ClusterIds, forget_mask: np.ndarray) -> float:
    """Best per-cluster F1 for recovering the forget set; 0 when no cluster touches it."""
    ids = _ids(assignment)
    mask = np.asarray(forget_mask, dtype=bool)
    if ids.shape != mask.shape:
        raise ShapeMismatch("cluster ids and mask differ in length")
    n_forget = int(mask.sum())
    if n_forget == 0:
        raise EmptyForgetSet("forget mask selects no sample")

    table = contingency_matrix(mask.astype(np.int64), ids)
    if table.shape[0] < 2:
        # nur Vergessens-Samples: jeder Cluster ist rein
        hits = table[0]
    else:
        hits = table[1]
    sizes = table.sum(axis=0)
    best = 0.0
    for inter, size in zip(hits, sizes):
        if inter == 0:
            continue
        precision = inter / size
        recall = inter / n_forget
        best = max(best, 2.0 * precision * recall / (precision + recall))
    return float(best)


# ---------------------------------------------------------------------------
# Output metrics
# ---------------------------------------------------------------------------

def accuracy(model: MlpModel, x: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch("inputs and labels differ in length")
    if y.size == 0:
        raise TooFewSamples("accuracy of an empty set")
    return float(np.mean(np.argmax(forward(model, x).probs, axis=1) == y))


def attack_success_rate(model: MlpModel, triggered_x: np.ndarray, target_label: int) -> float:
    """Fraction of trigger-stamped inputs classified as ``target_label``."""
    if triggered_x.shape[0] == 0:
        raise TooFewSamples("no triggered samples")
    return float(np.mean(np.argmax(forward(model, triggered_x).probs, axis=1) == target_label))


def confidences(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Max softmax probability per sample."""
    return forward(model, x).probs.max(axis=1)


class MiaResult(NamedTuple):
    rate: float
    soft_rate: float
    degenerate: bool


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def membership_attack(member_conf: np.ndarray, nonmember_conf: np.ndarray, forget_conf: np.ndarray,
                      seed: int = 0, steps: int = config.MIA_STEPS,
                      learning_rate: float = config.MIA_LEARNING_RATE) -> MiaResult:
    """
    1-D logistic regression on confidences: members -> 1, non-members -> 0.

    Returns the fraction of forget samples scored >= 0.5 and the mean score.
    Identical confidences everywhere give (0.5, 0.5) with the degenerate flag.
    """
    members = np.asarray(member_conf, dtype=np.float64).ravel()
    nonmembers = np.asarray(nonmember_conf, dtype=np.float64).ravel()
    forget = np.asarray(forget_conf, dtype=np.float64).ravel()
    if members.size == 0 or nonmembers.size == 0:
        raise TooFewSamples("attack needs member and non-member samples")
    if forget.size == 0:
        raise EmptyForgetSet("no forget samples to attack")

    q = np.concatenate([members, nonmembers])
    t = np.concatenate([np.ones(members.size), np.zeros(nonmembers.size)])
    mu, sd = q.mean(), q.std()
    if np.ptp(q) == 0.0 or sd <= 1e-12 * max(1.0, abs(mu)):
        log_warning("MIA confidences are (nearly) constant, reporting 0.5")
        return MiaResult(0.5, 0.5, True)
    qs = (q - mu) / sd
    weights = np.where(t == 1.0, q.size / (2.0 * members.size), q.size / (2.0 * nonmembers.size))

    rng = np.random.default_rng(seed)
    a, b = rng.normal(0.0, 0.01, size=2)
    for _ in range(steps):
        residual = weights * (_sigmoid(a * qs + b) - t) / q.size
        a -= learning_rate * float(np.sum(residual * qs))
        b -= learning_rate * float(np.sum(residual))

    scores = _sigmoid(a * (forget - mu) / sd + b)
    return MiaResult(float(np.mean(scores >= 0.5)), float(np.mean(scores)), False)


def mia_success_rate(model: MlpModel, retain_train_x: np.ndarray, test_x: np.ndarray,
                     forget_x: np.ndarray, seed: int = 0) -> float:
    return membership_attack(confidences(model, retain_train_x), confidences(model, test_x),
                             confidences(model, forget_x), seed=seed).rate


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def _guarded(name: str, fn, *args, **kwargs) -> Optional[float]:
    try:
        return fn(*args, **kwargs)
    except (TooFewSamples, SingleClassTrainingSet, DegenerateMask, ZeroEntropy) as e:
        logger.warning(f"{name} undefined: {e}")
        return None


class ProbeScores(NamedTuple):
    lp_forget: Optional[float]
    lp_retain: Optional[float]
    lp_sub: Optional[float]


def probe_scores(train_features: np.ndarray, test_features: np.ndarray, bundle: DataBundle,
                 probe_cfg: Optional[ProbeConfig] = None, with_sub: bool = True) -> ProbeScores:
    """
    LP(D_r): probe trained on D_r, scored on the test samples outside the forget target.
    LP(D_f): probe trained on D_r and D_f, scored on the forget target's test samples.
    LP_sub:  as LP(D_f) but predicting subclass ids.

    Undefined (None) for poisoned forget sets.
    """
    spec = bundle.forget_spec
    if spec is None or spec.mode not in ("class", "subclass"):
        return ProbeScores(None, None, None)
    r_idx = bundle.retain_idx
    eval_forget = forget_test_mask(bundle, spec)
    retain_test = ~eval_forget
    lp_retain = _guarded("lp_retain", linear_probe, train_features[r_idx], bundle.train_y[r_idx],
                         test_features[retain_test], bundle.test_y[retain_test], probe_cfg,
                         num_classes=bundle.num_classes)
    lp_forget = _guarded("lp_forget", linear_probe, train_features, bundle.train_y,
                         test_features[eval_forget], bundle.test_y[eval_forget], probe_cfg,
                         num_classes=bundle.num_classes)
    lp_sub = None
    if with_sub and bundle.train_sub is not None and bundle.test_sub is not None:
        lp_sub = _guarded("lp_sub", linear_probe, train_features, bundle.train_sub,
                          test_features[eval_forget], bundle.test_sub[eval_forget], probe_cfg,
                          num_classes=bundle.num_subclasses)
    return ProbeScores(lp_forget, lp_retain, lp_sub)


def evaluate_model(model: MlpModel, bundle: DataBundle, method: str = "", seed: int = 0,
                   reference: Optional[MetricsReport] = None,
                   probe_cfg: Optional[ProbeConfig] = None) -> MetricsReport:
    """
    Compute every metric that applies to ``bundle`` for one model.

    DA, F1, NMI and the train-split accuracies use train features; LP and MIA
    follow the probe/attack definitions above. Diffs against ``reference`` are
    filled when it is given.
    """
    if not bundle.has_partitions:
        raise EmptyForgetSet("bundle has no forget/retain partitions")
    probe_cfg = probe_cfg or ProbeConfig(seed=seed)
    f_idx, r_idx = bundle.forget_idx, bundle.retain_idx
    train_out = forward(model, bundle.train_x)
    feats = train_out.features
    test_feats = forward(model, bundle.test_x).features

    da = dimensional_alignment(feats[f_idx].T, feats[r_idx].T)

    lp = probe_scores(feats, test_feats, bundle, probe_cfg)

    mask = np.zeros(bundle.n_train, dtype=bool)
    mask[f_idx] = True
    clusters = kmeans(feats, bundle.num_classes, seed)
    f1 = f1_forget(clusters, mask)
    nmi = _guarded("nmi", nmi_forget, clusters, mask)

    probs = train_out.probs
    predicted = np.argmax(probs, axis=1)
    acc_forget = float(np.mean(predicted[f_idx] == bundle.train_y[f_idx]))
    acc_retain = float(np.mean(predicted[r_idx] == bundle.train_y[r_idx]))
    acc_test = accuracy(model, bundle.test_x, bundle.test_y)

    mia = membership_attack(probs[r_idx].max(axis=1), confidences(model, bundle.test_x),
                            probs[f_idx].max(axis=1), seed=seed)

    asr = None
    if bundle.backdoor is not None and bundle.triggered_test_x is not None:
        asr = attack_success_rate(model, bundle.triggered_test_x, bundle.backdoor.target_label)

    acc_confuse = None
    if bundle.confusion is not None:
        source = bundle.test_y == bundle.confusion.source_class
        acc_confuse = _guarded("acc_confuse", accuracy, model, bundle.test_x[source], bundle.test_y[source])

    report = MetricsReport(
        method=method,
        seed=seed,
        da=da,
        lp_forget=lp.lp_forget,
        lp_retain=lp.lp_retain,
        lp_sub=lp.lp_sub,
        f1=f1,
        nmi=nmi,
        acc_forget=acc_forget,
        acc_retain=acc_retain,
        mia=mia.rate,
        asr=asr,
        mia_soft=mia.soft_rate,
        acc_test=acc_test,
        acc_confuse=acc_confuse,
    )
    report.validate()
    if reference is not None:
        report = report.with_diffs(reference)
    log_eval(f"da={da:.4f} f1={f1:.4f} acc_test={acc_test:.4f}", method=method, seed=seed)
    return report
