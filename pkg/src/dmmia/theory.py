"""Numerical checks of the information-geometric claims behind the attack.

Everything here works on a single input image and a classifier: the
Fisher metric of the categorical output, its pull-back to input space
through the Jacobian, the second-order expansion of the output KL
divergence, and the minimizer of the Fisher trace over the simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, NumericalError
from .metrics import pairwise_diversity
from .numerics import Rng, Tensor

__all__ = [
    "FisherEstimate",
    "PerturbationProbe",
    "fisher_trace_enumerated",
    "fisher_trace_mc",
    "fisher_trace_softmax",
    "kl_taylor_probe",
    "pairwise_diversity",
    "project_simplex",
    "pullback_identity_check",
    "random_probe",
    "simplex_min_check",
]

MAX_PROBE_SCALE = 1e-2
MIN_PROB = 1e-12


def _check_prob(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ContractError(f"expected a probability vector, got shape {p.shape}")
    if np.any(p <= 0):
        raise ContractError(f"Fisher trace undefined: non-positive probability {p.min()!r}")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def fisher_trace_softmax(p):
    """Trace of the categorical Fisher metric in probability coordinates: sum of 1/p_i."""
    return float(np.sum(1.0 / _check_prob(p)))


def fisher_trace_enumerated(p):
    """The same trace as E_y ||grad_p log p_y||^2, summing over every label."""
    p = _check_prob(p)
    total = 0.0
    for y in range(p.size):
        g = np.zeros_like(p)
        g[y] = 1.0 / p[y]
        total += float(p[y]) * float(g @ g)
    return total


def fisher_trace_mc(p, rng, n_samples=10**6):
    """Monte-Carlo estimate of the trace from ``n_samples`` labels drawn from ``p``."""
    p = _check_prob(p)
    cdf = np.cumsum(p)
    y = np.minimum(np.searchsorted(cdf, rng.uniform(n_samples) * cdf[-1], side="right"), p.size - 1)
    return float(np.mean(1.0 / p[y] ** 2))


@dataclass(frozen=True)
class PerturbationProbe:
    """Base image, unit direction and step size of one local perturbation."""

    base: np.ndarray
    direction: np.ndarray
    scale: float

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64).reshape(-1)
        eta = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if base.shape != eta.shape:
            raise ContractError(f"probe direction shape {eta.shape} differs from base {base.shape}")
        norm = np.linalg.norm(eta)
        if norm == 0:
            raise ContractError("probe direction must be non-zero")
        if not 0 <= self.scale <= MAX_PROBE_SCALE:
            raise ContractError(f"probe scale {self.scale} outside [0, {MAX_PROBE_SCALE}]")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "direction", eta / norm)

    @property
    def vector(self):
        return self.scale * self.direction

    def with_scale(self, scale):
        return PerturbationProbe(self.base, self.direction, scale)


@dataclass
class FisherEstimate:
    exact_trace: float
    quadratic_form: float
    exact_kl: float
    mc_trace: float = math.nan
    n_samples: int = 0


def _frozen(clf):
    clf = clf.clone()
    clf.set_trainable(False)
    return clf


def _log_probs(clf, x):
    return nx.log_softmax(clf.logits(Tensor(x[None, :])), axis=1).data[0]


def _input_gradients(clf, x, transform):
    """Row ``i`` is the input gradient of ``transform(logits)[0, i]``, one backward pass each."""
    xt = Tensor(x[None, :], requires_grad=True)
    out = transform(clf.logits(xt))
    rows = []
    for i in range(out.shape[1]):
        xt.grad = None
        seed = np.zeros(out.shape)
        seed[0, i] = 1.0
        nx.backward(out, seed)
        rows.append(xt.grad[0].copy())
    return np.array(rows), out.data[0]


def jacobian(clf, x):
    """Jacobian of the softmax probabilities with respect to the input, shape (K, D)."""
    return _input_gradients(_frozen(clf), np.asarray(x, dtype=np.float64).reshape(-1), nx.softmax)[0]


def _checked_probs(p):
    if p.min() < MIN_PROB:
        raise ContractError(f"degenerate prediction: min probability {p.min():.3e} < {MIN_PROB}")
    return p


def kl_taylor_probe(clf, probe):
    """Exact output KL under the perturbation and its quadratic approximation."""
    clf = _frozen(clf)
    jac, p = _input_gradients(clf, probe.base, nx.softmax)
    _checked_probs(p)
    jv = jac @ probe.direction
    quad = 0.5 * probe.scale ** 2 * float(np.sum(jv * jv / p))
    lp = _log_probs(clf, probe.base)
    lq = _log_probs(clf, probe.base + probe.vector)
    kl = float(np.sum(np.exp(lp) * (lp - lq)))
    return FisherEstimate(exact_trace=fisher_trace_softmax(p / p.sum()), quadratic_form=quad, exact_kl=kl)


def pullback_identity_check(clf, probe):
    """Both sides of eta^T G_x eta = eta^T J^T G_s J eta for eta = scale * direction.

    The left side enumerates every label y with weight p_y, using input
    gradients of log p_y; the right side pulls the diagonal Fisher of the
    probabilities back through the Jacobian of the softmax.
    """
    clf = _frozen(clf)
    eta = probe.vector
    grads, logp = _input_gradients(clf, probe.base, lambda z: nx.log_softmax(z, axis=1))
    p = _checked_probs(np.exp(logp))
    lhs = float(np.sum(p * (grads @ eta) ** 2))
    jac, p_soft = _input_gradients(clf, probe.base, nx.softmax)
    rhs = float(np.sum((jac @ eta) ** 2 / p_soft))
    return lhs, rhs


def _activation_pattern(clf, x):
    """Sign pattern of every hidden pre-activation, concatenated."""
    h = Tensor(x[None, :])
    signs = []
    for w, b in clf.net.layers[:-1]:
        pre = nx.affine(h, w, b)
        signs.append(pre.data[0] > 0)
        h = nx.relu(pre)
    return np.concatenate(signs)


def stays_in_linear_region(clf, probe, max_scale=MAX_PROBE_SCALE):
    """True if no ReLU changes sign on the segment base -> base + max_scale * direction.

    Layer by layer the pre-activations are affine along the segment once
    the earlier layers' patterns are fixed, so equal patterns at both ends
    rule out a crossing anywhere in between.
    """
    return bool(np.array_equal(
        _activation_pattern(clf, probe.base),
        _activation_pattern(clf, probe.base + max_scale * probe.direction),
    ))


def random_probe(rng, clf, scale=MAX_PROBE_SCALE, max_tries=1000):
    """A probe at a random image in [0, 1]^D whose full-length segment crosses no ReLU kink."""
    d = clf.in_dim
    for _ in range(max_tries):
        probe = PerturbationProbe(rng.uniform(d), rng.normal(d), scale)
        if stays_in_linear_region(clf, probe):
            return probe
    raise NumericalError(f"no kink-free probe found in {max_tries} tries")


# -- simplex -------------------------------------------------------------------

def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort and cumulative sum)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def simplex_min_check(k, rng=None, start=None, max_iter=100_000, tol=1e-13):
    """Minimize sum 1/p_i over the simplex by projected gradient descent.

    Steps are halved until the iterate stays strictly inside the simplex and
    the objective strictly decreases, and doubled after each accepted step.
    Iterates stay interior, so the search stops once all partial
    derivatives agree to relative ``tol`` (or no step makes progress).
    """
    if k < 2:
        raise ContractError(f"simplex_min_check needs K >= 2, got {k}")
    if start is None:
        rng = rng or Rng(0)
        start = rng.uniform(k) + 0.05
    p = np.asarray(start, dtype=np.float64)
    if p.shape != (k,) or np.any(p <= 0):
        raise ContractError("start must be a positive vector of length K")
    p = p / p.sum()

    def objective(q):
        return float(np.sum(1.0 / q))

    f = objective(p)
    step = 1e-3
    for _ in range(max_iter):
        grad = -1.0 / p ** 2
        if grad.max() - grad.min() <= tol * np.abs(grad).max():
            return p
        while True:
            cand = project_simplex(p - step * grad)
            if np.all(cand > 0) and objective(cand) < f:
                break
            step /= 2
            if step < 1e-300:
                return p
        p, f = cand, objective(cand)
        step *= 2
    raise NumericalError(f"simplex descent did not converge in {max_iter} iterations")


# -- suite ---------------------------------------------------------------------

@dataclass
class CheckRow:
    check: str
    lhs: float
    rhs: float
    gap: float
    passed: bool


KL_SCALES = (1e-2, 5e-3, 2.5e-3)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def run_suite(clf, rng, n_probes=20, mc_samples=10**6, simplex_sizes=(2, 5, 10)):
    """Every numerical check, one row each; ``clf`` supplies the network for the probe checks."""
    rows = []
    k = clf.n_classes
    logits = rng.spawn("fisher").normal(k)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    exact = fisher_trace_softmax(p)
    enum = fisher_trace_enumerated(p)
    rows.append(CheckRow("fisher_trace_enumerated", exact, enum, _rel(exact, enum), _rel(exact, enum) <= 1e-12))
    mc = fisher_trace_mc(p, rng.spawn("fisher-mc"), mc_samples)
    rows.append(CheckRow("fisher_trace_mc", exact, mc, _rel(exact, mc), _rel(exact, mc) <= 0.02))
    uniform = fisher_trace_softmax(np.full(k, 1.0 / k))
    rows.append(CheckRow("fisher_trace_uniform", uniform, float(k * k), _rel(uniform, k * k), _rel(uniform, k * k) <= 1e-12))

    probe_rng = rng.spawn("probes")
    for i in range(n_probes):
        probe = random_probe(probe_rng, clf)
        lhs, rhs = pullback_identity_check(clf, probe)
        gap = abs(lhs - rhs) / max(abs(lhs), 1e-300)
        rows.append(CheckRow(f"pullback_{i}", lhs, rhs, gap, gap <= 1e-8))
        gaps = []
        for eps in KL_SCALES:
            est = kl_taylor_probe(clf, probe.with_scale(eps))
            gaps.append(abs(est.exact_kl - est.quadratic_form) / est.quadratic_form)
        for eps, g0, g1 in zip(KL_SCALES, gaps, gaps[1:]):
            ratio = g1 / g0
            rows.append(CheckRow(f"kl_taylor_{i}_eps{eps:g}", g0, g1, ratio, ratio <= 0.75))

    simplex_rng = rng.spawn("simplex")
    for size in simplex_sizes:
        p_min = simplex_min_check(size, simplex_rng)
        err = float(np.max(np.abs(p_min - 1.0 / size)))
        rows.append(CheckRow(f"simplex_{size}", float(np.sum(1.0 / p_min)), float(size * size), err, err <= 1e-6))
    return rows


def rows_to_csv(rows):
    lines = ["check,lhs,rhs,gap,pass"]
    for r in rows:
        lines.append(f"{r.check},{float(r.lhs)!r},{float(r.rhs)!r},{float(r.gap)!r},{str(bool(r.passed)).lower()}")
    return "\n".join(lines) + "\n"
