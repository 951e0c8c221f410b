"""Learnable multi-concept prototypes and the per-class feature memory.

The concept bank ``W`` (n_prototypes x feature_dim) scores a feature by
the softmax mass its first ``n_positive`` rows receive; it is trained by
gradient descent. The memory ``M`` (n_classes x feature_dim) stores a
momentum average of features predicted as each class and is never a
gradient leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Tensor


class ImrBank:
    """Concept prototypes: rows ``[0, n_positive)`` positive, the rest negative."""

    def __init__(self, weight, n_positive):
        weight = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        if weight.ndim != 2:
            raise ShapeError("ImrBank", weight.shape)
        if not 1 <= n_positive < weight.shape[0]:
            raise ContractError(f"ImrBank: need 1 <= n_positive < {weight.shape[0]}, got {n_positive}")
        weight.requires_grad = True
        self.W = weight
        self.n_positive = int(n_positive)

    @classmethod
    def init(cls, rng, n_prototypes, feature_dim, n_positive):
        # std 1/sqrt(d) keeps initial dot products O(|f|/sqrt(d)), near the symmetric value
        w = rng.normal(n_prototypes * feature_dim).reshape(n_prototypes, feature_dim) / np.sqrt(feature_dim)
        return cls(Tensor(w, requires_grad=True), n_positive)

    @property
    def n_prototypes(self):
        return self.W.shape[0]

    @property
    def feature_dim(self):
        return self.W.shape[1]


class IdrBank:
    """Per-class memory rows with momentum ``r`` and a written flag per class."""

    def __init__(self, n_classes, feature_dim, momentum):
        if not 0.0 <= momentum <= 1.0:
            raise ContractError(f"IdrBank: momentum must be in [0, 1], got {momentum}")
        self.M = Tensor(np.zeros((n_classes, feature_dim)))
        self.momentum = float(momentum)
        self.written = np.zeros(n_classes, dtype=bool)

    @property
    def n_classes(self):
        return self.M.shape[0]

    @property
    def feature_dim(self):
        return self.M.shape[1]


def _as_batch(features, dim, op):
    f = nx.as_tensor(features)
    if f.ndim == 1:
        f = nx.reshape(f, (1, -1))
    if f.ndim != 2 or f.shape[1] != dim:
        raise ShapeError(op, f.shape, (dim,), detail="feature dimension")
    return f


def normalize_rows(f):
    """Scale each row to unit L2 norm (differentiable)."""
    f = nx.as_tensor(f)
    return f / nx.reshape(nx.l2_norm(f, axis=1), (-1, 1))


def imr_log_prob(features, bank):
    """log p_imr per row: logsumexp over positive dots minus logsumexp over all dots."""
    f = _as_batch(features, bank.feature_dim, "imr")
    dots = nx.matmul(f, bank.W.T)
    return nx.logsumexp(nx.take_cols(dots, 0, bank.n_positive), axis=1) - nx.logsumexp(dots, axis=1)


def p_imr(features, bank):
    """Probability mass on the positive prototypes; float for one feature, array for a batch."""
    lp = np.exp(imr_log_prob(features, bank).data)
    return float(lp[0]) if np.ndim(features.data if isinstance(features, Tensor) else features) == 1 else lp


def imr_loss(features, bank):
    """Mean of -log p_imr over the batch; differentiable in features and ``bank.W``."""
    return nx.scale(nx.mean(imr_log_prob(features, bank)), -1.0)


def idr_log_prob(features, bank, target):
    if not 0 <= target < bank.n_classes:
        raise ContractError(f"idr: target class {target} out of range for {bank.n_classes} classes")
    f = _as_batch(features, bank.feature_dim, "idr")
    dots = nx.matmul(f, Tensor(bank.M.data.T))
    idx = np.full(f.shape[0], target)
    return nx.gather(dots, idx) - nx.logsumexp(dots, axis=1)


def p_idr(features, bank, target):
    lp = np.exp(idr_log_prob(features, bank, target).data)
    return float(lp[0]) if np.ndim(features.data if isinstance(features, Tensor) else features) == 1 else lp


def idr_loss(features, bank, target):
    """Mean of -log p_idr; gradient reaches the features only."""
    return nx.scale(nx.mean(idr_log_prob(features, bank, target)), -1.0)


def memory_update(bank, batch_features, predicted):
    """Momentum-average each predicted class's mean feature into the memory.

    A class seen for the first time has its row assigned directly; later
    visits blend ``r * old + (1 - r) * batch_mean``. Classes absent from
    the batch are untouched.
    """
    f = np.asarray(batch_features.data if isinstance(batch_features, Tensor) else batch_features, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if f.ndim != 2 or f.shape[1] != bank.feature_dim or f.shape[0] != predicted.shape[0]:
        raise ShapeError("memory_update", f.shape, predicted.shape)
    if predicted.size and (predicted.min() < 0 or predicted.max() >= bank.n_classes):
        raise ContractError(f"memory_update: class index out of range for {bank.n_classes} classes")
    r = bank.momentum
    for c in np.unique(predicted):
        fresh = f[predicted == c].mean(axis=0)
        if bank.written[c]:
            bank.M.data[c] = r * bank.M.data[c] + (1.0 - r) * fresh
        else:
            bank.M.data[c] = fresh
            bank.written[c] = True
    return bank


@dataclass
class Banks:
    """Both banks of one attack run, bundled for checkpointing."""

    imr: ImrBank
    idr: IdrBank

    kind = "banks"

    @classmethod
    def empty(cls, n_prototypes, n_positive, n_classes, feature_dim, momentum):
        imr = ImrBank(Tensor(np.zeros((n_prototypes, feature_dim)), requires_grad=True), n_positive)
        return cls(imr, IdrBank(n_classes, feature_dim, momentum))

    @classmethod
    def fresh(cls, rng, n_prototypes, n_positive, n_classes, feature_dim, momentum):
        return cls(ImrBank.init(rng, n_prototypes, feature_dim, n_positive), IdrBank(n_classes, feature_dim, momentum))

    def arch(self):
        return {
            "n_prototypes": self.imr.n_prototypes,
            "n_positive": self.imr.n_positive,
            "n_classes": self.idr.n_classes,
            "feature_dim": self.idr.feature_dim,
            "momentum": self.idr.momentum,
        }

    def state_blocks(self):
        return [
            ("imr.W", self.imr.W.data),
            ("idr.M", self.idr.M.data),
            ("idr.written", self.idr.written.astype(np.float64)),
        ]

    def load_state_blocks(self, blocks):
        blocks = dict(blocks)
        self.imr.W.data[...] = blocks["imr.W"]
        self.idr.M.data[...] = blocks["idr.M"]
        self.idr.written[...] = blocks["idr.written"] != 0
