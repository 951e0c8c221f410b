"""Prototype-guided model inversion: latent selection and the alternating loop.

One run attacks one target class. A fresh mapping network, concept bank
and memory bank are created from the run's seed; the synthesis network is
shared with the caller and must come out bit-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DmmiaError, NumericalError
from .models import Generator
from .numerics import AdamState, Rng, Tensor, sample_latents
from .prototypes import Banks, idr_loss, imr_loss, memory_update, normalize_rows


class ChecksumError(DmmiaError):
    pass


@dataclass
class AttackConfig:
    target_class: int = 0
    lambda_imr: float = 0.3
    lambda_idr: float = 0.7
    epochs: int = 50
    pool_size: int = 500
    n_selected: int = 50
    lr: float = 0.005
    beta1: float = 0.1
    beta2: float = 0.1
    batch_size: int = 16
    n_prototypes: int = 100
    n_positive: int = 50
    momentum: float = 0.7
    seed: int = 0
    baseline_mode: bool = False
    normalize_features: bool = False
    selection_shift: bool = False

    def validate(self):
        if self.lambda_imr < 0 or self.lambda_idr < 0:
            raise ContractError("AttackConfig: loss weights must be non-negative")
        if not 1 <= self.n_selected <= self.pool_size:
            raise ContractError(f"AttackConfig: need 1 <= n_selected <= pool_size, got {self.n_selected}/{self.pool_size}")
        if not 1 <= self.batch_size <= self.n_selected:
            raise ContractError(f"AttackConfig: need 1 <= batch_size <= n_selected, got {self.batch_size}")
        if not 1 <= self.n_positive < self.n_prototypes:
            raise ContractError(f"AttackConfig: need 1 <= n_positive < n_prototypes, got {self.n_positive}/{self.n_prototypes}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ContractError(f"AttackConfig: momentum must be in [0, 1], got {self.momentum}")
        if self.epochs < 1:
            raise ContractError("AttackConfig: epochs must be >= 1")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def digest(self):
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def steps_per_epoch(self):
        return math.ceil(self.n_selected / self.batch_size)


PAPER_PRESET = AttackConfig(
    lambda_imr=0.3, lambda_idr=0.7, epochs=50, pool_size=2000, n_selected=200,
    lr=0.005, beta1=0.1, beta2=0.1, batch_size=16, n_prototypes=500, n_positive=250, momentum=0.7,
)
DESK_PRESET = AttackConfig(
    lambda_imr=0.3, lambda_idr=0.7, epochs=50, pool_size=500, n_selected=50,
    lr=0.005, beta1=0.1, beta2=0.1, batch_size=16, n_prototypes=100, n_positive=50, momentum=0.7,
)
PRESETS = {"paper": PAPER_PRESET, "desk": DESK_PRESET}


def baseline_of(cfg):
    """The cross-entropy-only counterpart of ``cfg``."""
    return cfg.replace(baseline_mode=True, lambda_imr=0.0, lambda_idr=0.0)


@dataclass
class AttackResult:
    config: AttackConfig
    images: np.ndarray  # (n_selected, 28, 28)
    trajectory: np.ndarray  # (steps, 4): ce, imr, idr, total
    banks: Banks
    selected: np.ndarray
    latents: np.ndarray
    mapping_state: list = field(default_factory=list)
    synthesis_checksum: str = ""

    @property
    def config_digest(self):
        return self.config.digest()

    def trajectory_csv(self):
        lines = ["step,ce,imr,idr,total"]
        for i, row in enumerate(self.trajectory):
            lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


# -- selection ---------------------------------------------------------------

def top_k_indices(scores, k):
    """Indices of the ``k`` largest scores, highest first; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.shape[0]:
        raise ContractError(f"top_k: k={k} out of range for {scores.shape[0]} scores")
    return np.argsort(-scores, kind="stable")[:k]


def _shifted(images, dr, dc):
    out = np.zeros_like(images)
    h, w = images.shape[1:]
    src_r = slice(max(0, -dr), h - max(0, dr))
    dst_r = slice(max(0, dr), h - max(0, -dr))
    src_c = slice(max(0, -dc), w - max(0, dc))
    dst_c = slice(max(0, dc), w - max(0, -dc))
    out[:, dst_r, dst_c] = images[:, src_r, src_c]
    return out


SHIFTS = [(0, 0), (2, 0), (-2, 0), (0, 2), (0, -2)]


def selection_scores(gen, clf, pool, target, shift=False):
    from .models import predict

    z = pool.data if isinstance(pool, Tensor) else np.asarray(pool)
    images = gen(z).data.reshape(len(z), 28, 28)
    if not shift:
        return predict(clf, images)[1][:, target]
    probs = [predict(clf, _shifted(images, dr, dc))[1][:, target] for dr, dc in SHIFTS]
    return np.mean(probs, axis=0)


def select_latents(gen, clf, pool, target, k, shift=False):
    """Rows of ``pool`` whose decoded images the classifier rates most confidently as ``target``."""
    n = pool.shape[0]
    if k > n:
        raise ContractError(f"select_latents: k={k} exceeds pool size {n}")
    return top_k_indices(selection_scores(gen, clf, pool, target, shift), k)


# -- optimization ------------------------------------------------------------

@dataclass
class AttackState:
    config: AttackConfig
    target: object
    generator: Generator
    banks: Banks
    phi_adam: AdamState
    w_adam: AdamState
    step: int = 0

    @classmethod
    def create(cls, cfg, target, generator, banks):
        phi = generator.mapping.parameters()
        return cls(
            config=cfg,
            target=target,
            generator=generator,
            banks=banks,
            phi_adam=AdamState.for_params(phi, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2),
            w_adam=AdamState.for_params([banks.imr.W], lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2),
        )


def _embed(state, z):
    feats = state.target.features(state.generator(z))
    logits = state.target.head(feats)
    if state.config.normalize_features:
        feats = normalize_rows(feats)
    return feats, logits


def dmmia_step(batch_z, state):
    """One alternating update. Returns ``(ce, imr, idr, total)`` measured before the updates.

    Order: generate and score the batch, Adam-step the mapping on the
    weighted total, re-embed with the updated mapping held fixed and
    Adam-step the concept bank on its own loss, then fold the batch's
    features (from before the mapping step) into the memory by predicted
    class. Banks whose weight is zero are left untouched.
    """
    cfg = state.config
    phi = state.generator.mapping.parameters()
    W = state.banks.imr.W
    nx.zero_grad(phi + [W])
    y = cfg.target_class
    try:
        feats, logits = _embed(state, batch_z)
        ce = nx.cross_entropy(logits, y)
        if cfg.baseline_mode:
            imr = idr = None
            total = ce
        else:
            imr = imr_loss(feats, state.banks.imr)
            idr = idr_loss(feats, state.banks.idr, y)
            total = ce + nx.scale(imr, cfg.lambda_imr) + nx.scale(idr, cfg.lambda_idr)
    except NumericalError as exc:
        raise NumericalError(f"step {state.step}: {exc}") from exc
    # + 0.0 folds a -0.0 from an exactly saturated softmax into 0.0
    values = (
        ce.item() + 0.0,
        0.0 if imr is None else imr.item() + 0.0,
        0.0 if idr is None else idr.item() + 0.0,
        total.item() + 0.0,
    )
    nx.backward(total)
    nx.adam_step(phi, [p.grad for p in phi], state.phi_adam)

    if not cfg.baseline_mode and cfg.lambda_imr > 0:
        nx.zero_grad([W])
        fixed = Tensor(_embed(state, batch_z)[0].data)
        try:
            w_loss = imr_loss(fixed, state.banks.imr)
        except NumericalError as exc:
            raise NumericalError(f"step {state.step} (concept-bank update): {exc}") from exc
        nx.backward(w_loss)
        nx.adam_step([W], [W.grad], state.w_adam)
    nx.zero_grad(phi + [W])

    if not cfg.baseline_mode and cfg.lambda_idr > 0:
        memory_update(state.banks.idr, feats.data, np.argmax(logits.data, axis=1))
    state.step += 1
    return values


def run_attack(cfg, target, generator):
    """Invert ``cfg.target_class`` of ``target`` through ``generator``'s frozen synthesis."""
    cfg.validate()
    if not 0 <= cfg.target_class < target.n_classes:
        raise ContractError(f"target class {cfg.target_class} out of range for K={target.n_classes}")
    before = generator.synthesis_checksum()
    root = Rng(cfg.seed)

    gen = generator.with_fresh_mapping(root.spawn("mapping").seed)

    pool = sample_latents(root.spawn("pool"), cfg.pool_size, gen.z_dim)
    selected = select_latents(gen, target, pool, cfg.target_class, cfg.n_selected, cfg.selection_shift)
    z_sel = pool.data[selected]

    banks = Banks.fresh(
        root.spawn("banks"), cfg.n_prototypes, cfg.n_positive, target.n_classes, target.feature_dim, cfg.momentum
    )
    state = AttackState.create(cfg, target, gen, banks)
    shuffle = root.spawn("shuffle")
    rows = []
    for _ in range(cfg.epochs):
        order = shuffle.permutation(cfg.n_selected)
        for start in range(0, cfg.n_selected, cfg.batch_size):
            rows.append(dmmia_step(z_sel[order[start:start + cfg.batch_size]], state))

    images = gen(z_sel).data.reshape(cfg.n_selected, 28, 28)
    after = generator.synthesis_checksum()
    if after != before:
        raise ChecksumError(f"synthesis network changed during attack: {before[:12]} -> {after[:12]}")
    return AttackResult(
        config=cfg,
        images=images,
        trajectory=np.array(rows, dtype=np.float64).reshape(-1, 4),
        banks=banks,
        selected=selected,
        latents=z_sel,
        mapping_state=[p.data.copy() for p in gen.mapping.parameters()],
        synthesis_checksum=after,
    )


def prototype_macs(n_classes, n_prototypes, feature_dim):
    """Multiply-accumulates per sample for the two prototype terms (dot products only)."""
    return (n_classes + n_prototypes) * feature_dim
