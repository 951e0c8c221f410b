"""Target/evaluation classifiers and the mapping + synthesis generator."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, NumericalError, TrainingError
from .numerics import AdamState, Rng, Tensor

log = logging.getLogger(__name__)

IMAGE_DIM = 28 * 28


def _init_layer(rng, fan_in, fan_out, gain):
    w = rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) * np.sqrt(gain / fan_in)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


class Module:
    """Ordered collection of named parameter tensors."""

    kind = "module"

    def named_parameters(self):
        raise NotImplementedError

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def arch(self):
        raise NotImplementedError

    def state_blocks(self):
        return [(n, p.data) for n, p in self.named_parameters()]

    def load_state_blocks(self, blocks):
        for (_, p), (_, arr) in zip(self.named_parameters(), blocks):
            p.data[...] = arr

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def zero_grad(self):
        nx.zero_grad(self.parameters())

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def clone(self):
        return copy.deepcopy(self)


class MLP(Module):
    """Stack of affine layers: ``hidden_act`` between layers, ``out_act`` after the last."""

    def __init__(self, widths, rng, hidden_act="relu", out_act=None):
        if len(widths) < 2:
            raise ContractError(f"MLP needs at least two widths, got {widths}")
        self.widths = list(widths)
        self.hidden_act = hidden_act
        self.out_act = out_act
        gain = 2.0 if hidden_act == "relu" else 1.0
        self.layers = [_init_layer(rng, a, b, gain) for a, b in zip(widths[:-1], widths[1:])]

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(self.layers):
            out += [(f"l{i}.weight", w), (f"l{i}.bias", b)]
        return out

    def __call__(self, x, upto=None):
        h = nx.as_tensor(x)
        layers = self.layers if upto is None else self.layers[:upto]
        for i, (w, b) in enumerate(layers):
            h = nx.affine(h, w, b)
            last = i == len(self.layers) - 1
            act = self.out_act if last else self.hidden_act
            h = _ACTS[act](h) if act else h
        return h


_ACTS = {"relu": nx.relu, "tanh": nx.tanh, "sigmoid": nx.sigmoid}


# -- classifier --------------------------------------------------------------

class Classifier(Module):
    """ReLU MLP; ``features`` is the penultimate activation, ``logits`` the head."""

    kind = "classifier"

    def __init__(self, n_classes, hidden=(256, 128), seed=0, in_dim=IMAGE_DIM):
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.in_dim = int(in_dim)
        self.seed = int(seed)
        self.net = MLP([self.in_dim, *self.hidden, self.n_classes], Rng(seed).spawn("classifier"))
        self.metadata = {}

    @property
    def train_accuracy(self):
        return self.metadata.get("train_accuracy")

    @property
    def holdout_accuracy(self):
        return self.metadata.get("holdout_accuracy")

    @property
    def feature_dim(self):
        return self.hidden[-1]

    def named_parameters(self):
        return self.net.named_parameters()

    def arch(self):
        return {"n_classes": self.n_classes, "hidden": list(self.hidden), "in_dim": self.in_dim, "seed": self.seed}

    def features(self, x):
        return self.net(_flatten(x), upto=len(self.hidden))

    def head(self, f):
        w, b = self.net.layers[-1]
        return nx.affine(f, w, b)

    def logits(self, x):
        return self.head(self.features(x))

    def __call__(self, x):
        return self.logits(x)


def _flatten(x):
    if isinstance(x, Tensor):
        return x if x.ndim == 2 else nx.reshape(x, (x.shape[0], -1))
    x = np.asarray(x, dtype=np.float64)
    return Tensor(x.reshape(x.shape[0], -1) if x.ndim != 2 else x)


def _softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(clf, images, batch=1024):
    """Return ``(logits, probabilities)`` as arrays of shape (n, K)."""
    images = np.asarray(images).reshape(len(images), -1)
    logits = np.concatenate([clf.logits(images[i:i + batch]).data for i in range(0, len(images), batch)])
    return logits, _softmax_np(logits)


def features(clf, images, batch=1024):
    images = np.asarray(images).reshape(len(images), -1)
    return np.concatenate([clf.features(images[i:i + batch]).data for i in range(0, len(images), batch)])


def accuracy(clf, ds):
    logits, _ = predict(clf, ds.images)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    hidden: tuple = (256, 128)


def train_classifier(ds, cfg=None, holdout=None, n_classes=None):
    """Cross-entropy training with Adam; records train and held-out accuracy."""
    cfg = cfg or TrainConfig()
    if len(ds) == 0:
        raise ContractError("train_classifier: empty dataset")
    k = int(ds.labels.max()) + 1
    if n_classes is not None and n_classes != k:
        raise ContractError(f"train_classifier: labels imply K={k}, config says {n_classes}")
    clf = Classifier(k, cfg.hidden, seed=cfg.seed)
    params = clf.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    shuffle = Rng(cfg.seed).spawn("shuffle")
    x_all = ds.flat
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            clf.zero_grad()
            try:
                loss = nx.cross_entropy(clf.logits(x_all[idx]), ds.labels[idx])
            except NumericalError as exc:
                raise TrainingError(f"classifier diverged: {exc}", epoch=epoch) from exc
            nx.backward(loss)
            nx.step_params(params, state)
        log.debug("classifier epoch %d loss %.4f", epoch, loss.item())
    clf.set_trainable(False)
    clf.metadata["train_accuracy"] = accuracy(clf, ds)
    if holdout is not None:
        clf.metadata["holdout_accuracy"] = accuracy(clf, holdout)
    return clf


# -- generator ---------------------------------------------------------------

class MappingNetwork(Module):
    """z -> w through two affine+tanh layers. The only part trained by an attack."""

    kind = "mapping"

    def __init__(self, z_dim=32, w_dim=64, seed=0):
        self.z_dim, self.w_dim, self.seed = int(z_dim), int(w_dim), int(seed)
        self.net = MLP([self.z_dim, self.w_dim, self.w_dim], Rng(seed).spawn("mapping"),
                       hidden_act="tanh", out_act="tanh")

    def named_parameters(self):
        return self.net.named_parameters()

    def __call__(self, z):
        return self.net(z)


class SynthesisNetwork(Module):
    """w -> image (784 pixels in (0, 1)) through affine+relu, affine+sigmoid."""

    kind = "synthesis"

    def __init__(self, w_dim=64, hidden=256, seed=0):
        self.w_dim, self.hidden, self.seed = int(w_dim), int(hidden), int(seed)
        self.net = MLP([self.w_dim, self.hidden, IMAGE_DIM], Rng(seed).spawn("synthesis"), out_act="sigmoid")

    def named_parameters(self):
        return self.net.named_parameters()

    def __call__(self, w):
        return self.net(w)


class Generator(Module):
    kind = "generator"

    def __init__(self, z_dim=32, w_dim=64, hidden=256, seed=0):
        self.mapping = MappingNetwork(z_dim, w_dim, seed)
        self.synthesis = SynthesisNetwork(w_dim, hidden, seed)
        self.encoder = None  # kept after autoencoder pretraining, unused by attacks
        self.metadata = {}

    @property
    def z_dim(self):
        return self.mapping.z_dim

    def named_parameters(self):
        out = [(f"mapping.{n}", p) for n, p in self.mapping.named_parameters()]
        out += [(f"synthesis.{n}", p) for n, p in self.synthesis.named_parameters()]
        if self.encoder is not None:
            out += [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
        return out

    def arch(self):
        return {
            "z_dim": self.mapping.z_dim,
            "w_dim": self.mapping.w_dim,
            "hidden": self.synthesis.hidden,
            "encoder": self.encoder is not None,
        }

    def reinit_mapping(self, seed):
        """Fresh mapping weights from ``seed``; synthesis is left alone."""
        self.mapping = MappingNetwork(self.mapping.z_dim, self.mapping.w_dim, seed)
        return self

    def with_fresh_mapping(self, seed):
        """A generator sharing this one's synthesis network, with a new mapping from ``seed``."""
        other = copy.copy(self)
        other.encoder = None
        other.metadata = {}
        return other.reinit_mapping(seed)

    def synthesis_checksum(self):
        return self.synthesis.checksum()

    def __call__(self, z):
        return self.synthesis(self.mapping(z))


@dataclass
class GeneratorConfig:
    mode: str = "autoencoder"  # or "gan"
    z_dim: int = 32
    w_dim: int = 64
    hidden: int = 256
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    prior_std: float = 0.5
    kl_weight: float = 1.0
    mse_threshold: float = 0.05
    seed: int = 0


def pretrain_generator(public_ds, cfg=None):
    """Fit the synthesis network on public data and return a frozen-prior generator.

    ``autoencoder`` mode trains a variational encoder jointly with the
    synthesis network: codes are sampled from the encoder's diagonal
    Gaussian and pulled toward N(0, prior_std^2), the region a freshly
    initialized mapping network emits into. ``gan`` mode trains mapping +
    synthesis against an MLP discriminator with the non-saturating loss.
    In both modes the mapping is re-initialized afterwards and synthesis
    gradients are switched off.
    """
    cfg = cfg or GeneratorConfig()
    gen = Generator(cfg.z_dim, cfg.w_dim, cfg.hidden, seed=cfg.seed)
    if cfg.mode == "autoencoder":
        encoder, mse = _train_autoencoder(public_ds, gen, cfg)
        gen.metadata["reconstruction_mse"] = mse
        if mse > cfg.mse_threshold:
            msg = f"reconstruction MSE {mse:.4f} above threshold {cfg.mse_threshold}"
            log.warning(msg)
            gen.metadata["warning"] = msg
        gen.encoder = encoder
    elif cfg.mode == "gan":
        _train_gan(public_ds, gen, cfg)
    else:
        raise ContractError(f"unknown generator mode {cfg.mode!r}")
    gen.metadata["mode"] = cfg.mode
    gen.reinit_mapping(Rng(cfg.seed).spawn("fresh-mapping").seed)
    gen.synthesis.set_trainable(False)
    return gen


def make_encoder(hidden, w_dim, seed):
    """Image -> (code mean, code log-variance), concatenated along columns."""
    return MLP([IMAGE_DIM, hidden, 2 * w_dim], Rng(seed).spawn("encoder"))


def encode_mean(encoder, images):
    w_dim = encoder.widths[-1] // 2
    return nx.take_cols(encoder(_flatten(images)), 0, w_dim)


def _train_autoencoder(ds, gen, cfg):
    encoder = make_encoder(cfg.hidden, cfg.w_dim, cfg.seed)
    params = encoder.parameters() + gen.synthesis.parameters()
    state = AdamState.for_params(params, lr=cfg.lr)
    rng = Rng(cfg.seed).spawn("autoencoder")
    x_all = ds.flat
    prior_var = cfg.prior_std ** 2
    d = cfg.w_dim
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            x = x_all[order[start:start + cfg.batch_size]]
            n = len(x)
            nx.zero_grad(params)
            try:
                out = encoder(x)
                mu, logvar = nx.take_cols(out, 0, d), nx.take_cols(out, d, 2 * d)
                std = nx.exp(nx.scale(logvar, 0.5))
                code = mu + std * Tensor(rng.normal(n * d).reshape(n, d))
                diff = gen.synthesis(code) - Tensor(x)
                recon = nx.scale(nx.sum(diff * diff), 1.0 / n)
                # KL(N(mu, std^2) || N(0, prior_var)) up to a constant, summed over dims
                kl = nx.sum(nx.scale(nx.exp(logvar) + mu * mu, 1.0 / prior_var) - logvar)
                loss = recon + nx.scale(kl, 0.5 * cfg.kl_weight / n)
            except NumericalError as exc:
                raise TrainingError(f"autoencoder diverged: {exc}", epoch=epoch) from exc
            nx.backward(loss)
            nx.step_params(params, state)
    nx.zero_grad(params)
    recon = gen.synthesis(encode_mean(encoder, x_all).data).data
    return encoder, float(np.mean((recon - x_all) ** 2))


def _train_gan(ds, gen, cfg):
    disc = MLP([IMAGE_DIM, cfg.hidden, 1], Rng(cfg.seed).spawn("discriminator"))
    g_params = gen.parameters()
    d_params = disc.parameters()
    g_state = AdamState.for_params(g_params, lr=cfg.lr, beta1=0.5)
    d_state = AdamState.for_params(d_params, lr=cfg.lr, beta1=0.5)
    rng = Rng(cfg.seed).spawn("gan")
    x_all = ds.flat

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            x = x_all[order[start:start + cfg.batch_size]]
            n = len(x)
            z = rng.normal(n * gen.z_dim).reshape(n, gen.z_dim)
            try:
                nx.zero_grad(d_params + g_params)
                fake = Tensor(gen(z).data)
                d_loss = nx.mean(nx.softplus(-disc(x))) + nx.mean(nx.softplus(disc(fake)))
                nx.backward(d_loss)
                nx.step_params(d_params, d_state)
                nx.zero_grad(d_params + g_params)
                g_loss = nx.mean(nx.softplus(-disc(gen(z))))
                nx.backward(g_loss)
                nx.step_params(g_params, g_state)
            except NumericalError as exc:
                raise TrainingError(f"GAN diverged: {exc}", epoch=epoch) from exc
    nx.zero_grad(d_params + g_params)
    gen.metadata["gan_final_d_loss"] = float(d_loss.item())
