import numpy as np
import pytest

from dmmia.numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def lab():
    """A small trained target/evaluator/generator trio on synthetic digits."""
    from types import SimpleNamespace

    from dmmia.data import MNIST_SPLIT, split_public_private, synth_digits, train_holdout_split
    from dmmia.models import GeneratorConfig, TrainConfig, pretrain_generator, train_classifier

    ds = synth_digits(Rng(21), 100, 10)
    public, private, _ = split_public_private(ds, MNIST_SPLIT)
    train, holdout = train_holdout_split(private, Rng(22))
    return SimpleNamespace(
        public=public,
        train=train,
        holdout=holdout,
        target=train_classifier(train, TrainConfig(epochs=10, seed=1), holdout=holdout),
        evaluator=train_classifier(train, TrainConfig(epochs=10, seed=2, hidden=(320, 128)), holdout=holdout),
        generator=pretrain_generator(public, GeneratorConfig(epochs=10, seed=3)),
    )
