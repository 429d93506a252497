"""Linear-probe dependency analysis of learned representations.

A multinomial logistic regression trained on frozen embeddings estimates how
predictable domain (or class) labels are from a representation; with 0-1 loss
over domain labels this probe's error is exactly the restricted-class
dependency statistic, so high accuracy is direct evidence of dependence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import DOMAINS, ImageDataset, transform_batch
from .layers import embedding_lookup, film_generate
from .models import ModelBundle, ModelVariant, UnsupportedModeError
from .tensor import Tensor, ValidationError, global_avg_pool, no_grad

PROBE_L2 = 1e-3
PROBE_MAX_ITER = 5000
PROBE_TOL = 1e-5
EXTRACT_BATCH = 512


class ProbeError(ValueError):
    """Probe cross-validation could not be set up (degenerate folds...)."""


@dataclass
class EmbeddingSet:
    """Per-example representation vectors with both label targets attached."""

    vectors: np.ndarray       # (M, d)
    domain_labels: np.ndarray
    class_labels: np.ndarray
    source: str               # "z" or "film_params_layer_<k>"

    def __post_init__(self):
        m = self.vectors.shape[0]
        if self.domain_labels.shape != (m,) or self.class_labels.shape != (m,):
            raise ValidationError("embedding vectors and targets disagree in length")

    def targets(self, kind: str) -> np.ndarray:
        if kind == "domain":
            return self.domain_labels
        if kind == "class":
            return self.class_labels
        raise ValidationError(f"unknown target kind {kind!r}")


@dataclass
class ProbeReport:
    fold_accuracies: list[float]  # percent, one per fold
    mean: float
    ci95_half_width: float
    params: dict

    def to_dict(self) -> dict:
        return {"fold_accuracies": self.fold_accuracies, "mean": self.mean,
                "ci95_half_width": self.ci95_half_width, "params": self.params}


def _in_domain_vectors(bundle: ModelBundle, ds: ImageDataset, rng, vector_fn):
    chunks, domains = [], []
    with no_grad():
        for start in range(0, len(ds), EXTRACT_BATCH):
            sl = slice(start, start + EXTRACT_BATCH)
            ids = rng.integers(0, len(DOMAINS), size=len(ds.labels[sl]))
            x = transform_batch(ds.images[sl], ids, rng)
            chunks.append(vector_fn(Tensor(x), ids))
            domains.append(ids)
    return np.concatenate(chunks), np.concatenate(domains)


def extract_z_embeddings(bundle: ModelBundle, ds: ImageDataset,
                         rng: np.random.Generator) -> EmbeddingSet:
    """Conditioning vectors under the in-domain transform protocol.

    Conditional and self-modulated bundles expose the 32-d domain-network z;
    unconditional and adversarial bundles substitute their pooled 64-d
    backbone features.
    """
    if bundle.variant is ModelVariant.EMBEDDING_CONDITIONED:
        raise UnsupportedModeError("embedding-conditioned models have no per-example "
                                   "representation to probe")

    def vector_fn(x, ids):
        out = bundle.forward(x)
        z = out.z if out.z is not None else global_avg_pool(out.trunk)
        return z.data.copy()

    vectors, domains = _in_domain_vectors(bundle, ds, rng, vector_fn)
    return EmbeddingSet(vectors, domains, ds.labels.copy(), "z")


def extract_film_params(bundle: ModelBundle, ds: ImageDataset,
                        rng: np.random.Generator, layer: int) -> EmbeddingSet:
    """Concatenated (scale, offset) emitted by modulation layer `layer` (1-based)."""
    gens = bundle.task.films
    if not gens:
        raise UnsupportedModeError(f"variant {bundle.variant.value} has no modulation layers")
    if not 1 <= layer <= len(gens):
        raise ValidationError(f"modulation layer must be in [1, {len(gens)}], got {layer}")
    gen = gens[layer - 1]

    def vector_fn(x, ids):
        if bundle.embedding is not None:
            z = embedding_lookup(bundle.embedding, ids)
        else:
            z = bundle.forward(x).z
        s, o = film_generate(gen, z)
        return np.concatenate([s.data, o.data], axis=1)

    vectors, domains = _in_domain_vectors(bundle, ds, rng, vector_fn)
    return EmbeddingSet(vectors, domains, ds.labels.copy(), f"film_params_layer_{layer}")


# ---------------------------------------------------------------------------
# cross-validated probe


def _fold_assignment(y: np.ndarray, folds: int, rng) -> np.ndarray:
    """Random folds, retried stratified if some training fold misses a class."""
    m = y.size
    assign = np.empty(m, dtype=np.int64)
    assign[rng.permutation(m)] = np.arange(m) % folds

    def degenerate(a):
        classes = np.unique(y)
        return any(np.setdiff1d(classes, np.unique(y[a != f])).size for f in range(folds))

    if not degenerate(assign):
        return assign
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        assign[members[rng.permutation(members.size)]] = np.arange(members.size) % folds
    if degenerate(assign):
        raise ProbeError("a class is absent from some training fold even after stratification")
    return assign


def _fit_logistic(x: np.ndarray, y: np.ndarray, classes: int, l2: float,
                  max_iter: int, tol: float) -> np.ndarray:
    """Full-batch gradient descent on L2-regularized multinomial CE.

    The step size is 1/L with L from the softmax Hessian bound 0.5/n * ||X||^2
    plus the penalty curvature, so descent is monotone without line search.
    The returned weights are (d+1, classes) with an unpenalized bias row.
    """
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), y] = 1.0

    v = np.ones(d + 1) / np.sqrt(d + 1)
    for _ in range(60):  # power iteration for the top singular value of xa
        v = xa.T @ (xa @ v)
        v /= np.linalg.norm(v)
    smax2 = float(v @ (xa.T @ (xa @ v)))
    step = 1.0 / (0.5 * smax2 / n + 2.0 * l2 + 1e-12)

    w = np.zeros((d + 1, classes))
    penalty_mask = np.ones((d + 1, 1))
    penalty_mask[d] = 0.0
    for _ in range(max_iter):
        logits = xa @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = xa.T @ (p - onehot) / n + 2.0 * l2 * (w * penalty_mask)
        if float(np.sqrt((grad * grad).sum())) < tol:
            break
        w -= step * grad
    return w


def logistic_probe_cv(es: EmbeddingSet, target: str = "domain", folds: int = 5,
                      rng: np.random.Generator | None = None, l2: float = PROBE_L2,
                      max_iter: int = PROBE_MAX_ITER, tol: float = PROBE_TOL) -> ProbeReport:
    """K-fold cross-validated logistic probe with a Student-t 95% interval.

    Features are standardized with each training fold's statistics; folds are
    deterministic given the rng.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    y = es.targets(target)
    classes = int(y.max()) + 1
    if len(y) < folds * classes:
        raise ProbeError(f"need at least folds*classes = {folds * classes} examples, got {len(y)}")
    assign = _fold_assignment(y, folds, rng)

    accs = []
    for f in range(folds):
        train, test = assign != f, assign == f
        mu = es.vectors[train].mean(axis=0)
        sd = es.vectors[train].std(axis=0)
        sd[sd < 1e-12] = 1.0
        w = _fit_logistic((es.vectors[train] - mu) / sd, y[train], classes, l2, max_iter, tol)
        xt = np.hstack([(es.vectors[test] - mu) / sd, np.ones((int(test.sum()), 1))])
        pred = (xt @ w).argmax(axis=1)
        accs.append(100.0 * float((pred == y[test]).mean()))

    mean = float(np.mean(accs))
    half = 0.0
    if folds > 1:
        half = float(stats.t.ppf(0.975, folds - 1) * np.std(accs, ddof=1) / np.sqrt(folds))
    return ProbeReport(accs, mean, half,
                       {"target": target, "source": es.source, "folds": folds,
                        "l2": l2, "max_iter": max_iter, "tol": tol})


def dependency_statistic(report: ProbeReport) -> float:
    """Achievable 0-1 risk of the linear class on this probe's targets.

    This is the restricted-model dependency test statistic; over domain
    labels it coincides with the classifier-induced divergence between the
    domains' feature distributions.
    """
    return 1.0 - report.mean / 100.0


def export_embeddings(es: EmbeddingSet, path) -> None:
    """CSV with d feature columns followed by domain_label, class_label."""
    d = es.vectors.shape[1]
    header = ",".join([f"feature_{i}" for i in range(d)] + ["domain_label", "class_label"])
    table = np.hstack([es.vectors,
                       es.domain_labels[:, None].astype(np.float64),
                       es.class_labels[:, None].astype(np.float64)])
    np.savetxt(path, table, delimiter=",", header=header, comments="",
               fmt=["%.17g"] * d + ["%d", "%d"])
