"""Attack evaluation: accuracy, feature distances, FID, PRDC and their DIV mean.

All distances live in the evaluation classifier's penultimate feature
space. Distance matrices are built one row at a time with a fixed
reduction, so every k-NN quantity is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ContractError, NumericalError, ParseError, ShapeError
from .models import features, predict

# -- accuracy ----------------------------------------------------------------

def topk_hits(scores, target, k):
    """Boolean per row: is ``target`` among the ``k`` highest scores?

    A class outranks the target if its score is larger, or equal with a
    lower index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_classes = scores.shape[1]
    if not 1 <= k <= n_classes:
        raise ContractError(f"acc@k: k={k} must lie in [1, {n_classes}]")
    t = scores[:, [target]]
    lower = np.arange(n_classes) < target
    ahead = (scores > t) | ((scores == t) & lower)
    return ahead.sum(axis=1) < k


def acc_at_k(eval_clf, images, target, k):
    """Percentage of ``images`` whose ``target`` is in the evaluator's top ``k``."""
    _, probs = predict(eval_clf, images)
    return 100.0 * float(np.mean(topk_hits(probs, target, k)))


# -- distances ---------------------------------------------------------------

def distance_matrix(a, b):
    """Euclidean distances, row ``i`` computed as ``sqrt(sum((b - a[i])**2))``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("distance_matrix", a.shape, b.shape)
    out = np.empty((a.shape[0], b.shape[0]))
    for i, row in enumerate(a):
        out[i] = np.sqrt(np.sum((row - b) ** 2, axis=1))
    return out


def cosine_distance_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_distance_matrix", a.shape, b.shape)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.sqrt(np.sum(b * b, axis=1))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericalError("cosine distance undefined for a zero-norm feature")
    out = np.empty((a.shape[0], b.shape[0]))
    for i, row in enumerate(a):
        out[i] = 1.0 - np.sum(row * b, axis=1) / (na[i] * nb)
    return out


def nearest_distances(fake_feats, real_feats, metric="l2"):
    """Per-fake distance to the closest real feature."""
    if len(fake_feats) == 0 or len(real_feats) == 0:
        raise ContractError("nearest distance needs non-empty fake and real sets")
    if metric == "l2":
        d = distance_matrix(fake_feats, real_feats)
    elif metric == "cosine":
        d = cosine_distance_matrix(fake_feats, real_feats)
    else:
        raise ContractError(f"unknown metric {metric!r}")
    return d.min(axis=1)


def nearest_feature_distance(eval_clf, fake_images, private_images, metric="l2"):
    mins = nearest_distances(features(eval_clf, fake_images), features(eval_clf, private_images), metric)
    return math.fsum(mins) / len(mins)


def pairwise_diversity(feats):
    """Mean Euclidean distance over all unordered pairs of rows."""
    feats = np.asarray(feats.data if hasattr(feats, "data") else feats, dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise ContractError("pairwise diversity needs at least two rows")
    d = distance_matrix(feats, feats)
    return math.fsum(d[np.triu_indices(n, 1)]) / (n * (n - 1) // 2)


# -- FID ---------------------------------------------------------------------

def _round_robin(n):
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        rounds.append([(min(p, q), max(p, q)) for p, q in pairs if max(p, q) < n])
        idx = [idx[0], idx[-1], *idx[1:-1]]
    return [(np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in rounds if r]


def jacobi_eigh(a, tol=1e-12, max_sweeps=60):
    """Eigenvalues and eigenvectors of a symmetric matrix by Jacobi rotations.

    Each round annihilates a set of disjoint off-diagonal pairs at once;
    sweeps continue until the off-diagonal Frobenius norm is at most
    ``tol`` times the matrix's norm.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("jacobi_eigh", a.shape)
    n = a.shape[0]
    a = (a + a.T) / 2
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0:
        return np.diag(a).copy(), v
    rounds = _round_robin(n)
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.linalg.norm(a[off_mask]) <= tol * scale:
            return np.diag(a).copy(), v
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0
            if not active.any():
                continue
            with np.errstate(over="ignore", divide="ignore"):
                # |tau| overflowing to inf gives t = 0, the correct limit
                tau = np.where(active, (a[q, q] - a[p, p]) / (2 * np.where(active, apq, 1.0)), 0.0)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * cp - s * cq
            a[:, q] = s * cp + c * cq
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def _clamped_eigenvalues(ev, what):
    floor = -1e-10 * max(1.0, float(np.max(np.abs(ev))))
    if np.min(ev) < floor:
        raise NumericalError(f"{what} is not positive semidefinite: eigenvalue {np.min(ev):.3e}")
    return np.clip(ev, 0.0, None)


def psd_sqrt(cov):
    ev, vec = jacobi_eigh(cov)
    ev = _clamped_eigenvalues(ev, "covariance")
    return (vec * np.sqrt(ev)) @ vec.T


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ContractError(f"FID needs at least 2 samples per side, got {x.shape[0]}")
    mu = x.mean(axis=0)
    xc = x - mu
    return mu, xc.T @ xc / (x.shape[0] - 1)


def frechet_distance(mu1, cov1, mu2, cov2):
    """Frechet distance between two Gaussians given their moments."""
    s1 = psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    ev = _clamped_eigenvalues(jacobi_eigh((inner + inner.T) / 2)[0], "sqrt(S1) S2 sqrt(S1)")
    diff = np.asarray(mu1) - np.asarray(mu2)
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.sum(np.sqrt(ev)))
    return max(value, 0.0)


def fid(real_features, fake_features):
    mu_r, cov_r = _moments(real_features)
    mu_f, cov_f = _moments(fake_features)
    if mu_r.shape != mu_f.shape:
        raise ShapeError("fid", mu_r.shape, mu_f.shape)
    return frechet_distance(mu_r, cov_r, mu_f, cov_f)


# -- precision / recall / density / coverage ---------------------------------

def default_k(n_real, n_fake):
    """k=5 as in the reference implementations; k=3 once either set has at most 50 points."""
    return 3 if min(n_real, n_fake) <= 50 else 5


def knn_radii(points, k):
    d = distance_matrix(points, points)
    np.fill_diagonal(d, np.inf)
    return np.sort(d, axis=1)[:, k - 1]


def prdc(real_features, fake_features, k=None):
    """Precision, recall, density and coverage with k-NN balls (strict inclusion)."""
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    nr, nf = len(real), len(fake)
    k = default_k(nr, nf) if k is None else int(k)
    if not 1 <= k < min(nr, nf):
        raise ContractError(f"prdc: need 1 <= k < min(|real|, |fake|) = {min(nr, nf)}, got k={k}")
    real_r = knn_radii(real, k)
    fake_r = knn_radii(fake, k)
    d = distance_matrix(real, fake)
    inside_real = d < real_r[:, None]
    precision = float(np.mean(inside_real.any(axis=0)))
    recall = float(np.mean((d < fake_r[None, :]).any(axis=1)))
    density = float(inside_real.sum()) / (k * nf)
    coverage = float(np.mean(d.min(axis=1) < real_r))
    return precision, recall, density, coverage


def div_score(precision, recall, density, coverage):
    return (precision + recall + density + coverage) / 4.0


# -- report ------------------------------------------------------------------

@dataclass
class MetricsReport:
    target_class: int
    method: str
    acc1: float
    acc5: float
    l2_eval: float
    cos_eval: float
    fid: float
    precision: float
    recall: float
    density: float
    coverage: float
    div: float

    def __post_init__(self):
        for name in ("precision", "recall", "coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"MetricsReport: {name}={v} outside [0, 1]")
        if self.density < 0:
            raise ContractError(f"MetricsReport: density={self.density} is negative")

    def row(self):
        return asdict(self)


REPORT_COLUMNS = [f.name for f in fields(MetricsReport)]
_INT_COLS = {"target_class"}
_STR_COLS = {"method"}


def build_report(eval_clf, fake_images, private_images, target, method, k=None):
    """Evaluate one attack run's images against the private images of ``target``."""
    fake_f = features(eval_clf, fake_images)
    real_f = features(eval_clf, private_images)
    p, r, d, c = prdc(real_f, fake_f, k)
    n_classes = eval_clf.n_classes
    return MetricsReport(
        target_class=int(target),
        method=method,
        acc1=acc_at_k(eval_clf, fake_images, target, 1),
        acc5=acc_at_k(eval_clf, fake_images, target, min(5, n_classes)),
        l2_eval=math.fsum(nearest_distances(fake_f, real_f, "l2")) / len(fake_f),
        cos_eval=math.fsum(nearest_distances(fake_f, real_f, "cosine")) / len(fake_f),
        fid=fid(real_f, fake_f),
        precision=p,
        recall=r,
        density=d,
        coverage=c,
        div=div_score(p, r, d, c),
    )


def _fmt(value):
    return repr(float(value)) if isinstance(value, float) else str(value)


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rep in reports:
        writer.writerow([_fmt(v) for v in rep.row().values()])
    return buf.getvalue()


def reports_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != REPORT_COLUMNS:
        raise ParseError(f"report header must be {','.join(REPORT_COLUMNS)}", offset=0)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(REPORT_COLUMNS):
            raise ParseError(f"line {lineno}: expected {len(REPORT_COLUMNS)} fields, got {len(row)}", offset=lineno)
        values = {}
        for name, raw in zip(REPORT_COLUMNS, row):
            try:
                values[name] = raw if name in _STR_COLS else int(raw) if name in _INT_COLS else float(raw)
            except ValueError:
                raise ParseError(f"line {lineno}: bad value {raw!r} for {name}", offset=lineno) from None
        out.append(MetricsReport(**values))
    return out


def mean_report(reports, method=None):
    """Column-wise mean of numeric fields; ``target_class`` is set to -1."""
    if not reports:
        raise ContractError("mean_report: no reports")
    numeric = [n for n in REPORT_COLUMNS if n not in _INT_COLS | _STR_COLS]
    vals = {n: math.fsum(getattr(r, n) for r in reports) / len(reports) for n in numeric}
    return MetricsReport(target_class=-1, method=method or reports[0].method, **vals)
