import math

import numpy as np
import pytest

from dmmia.attack import (
    DESK_PRESET,
    PAPER_PRESET,
    AttackConfig,
    AttackState,
    baseline_of,
    dmmia_step,
    prototype_macs,
    run_attack,
    select_latents,
    top_k_indices,
)
from dmmia.errors import ContractError
from dmmia.numerics import Rng, sample_latents
from dmmia.prototypes import Banks

SMALL = DESK_PRESET.replace(epochs=3, pool_size=40, n_selected=12, batch_size=5, n_prototypes=10, n_positive=5)


def test_top_k_example():
    assert set(top_k_indices([0.1, 0.9, 0.5], 2).tolist()) == {1, 2}


def test_top_k_full_pool_is_identity_set():
    scores = np.array([0.3, 0.1, 0.7, 0.2])
    assert sorted(top_k_indices(scores, 4).tolist()) == [0, 1, 2, 3]


def test_top_k_ties_take_lowest_indices():
    assert top_k_indices(np.full(6, 0.25), 3).tolist() == [0, 1, 2]


def test_top_k_rejects_oversized_k():
    with pytest.raises(ContractError):
        top_k_indices([0.1, 0.2], 3)


def test_select_latents_errors_when_k_exceeds_pool(lab):
    pool = sample_latents(Rng(0), 5, lab.generator.z_dim)
    with pytest.raises(ContractError):
        select_latents(lab.generator, lab.target, pool, 0, 6)


def test_select_latents_picks_most_confident(lab):
    from dmmia.models import predict

    pool = sample_latents(Rng(0), 30, lab.generator.z_dim)
    idx = select_latents(lab.generator, lab.target, pool, 2, 5)
    scores = predict(lab.target, lab.generator(pool).data.reshape(30, 28, 28))[1][:, 2]
    assert np.all(scores[idx] >= np.delete(scores, idx).max())


def test_config_validation():
    with pytest.raises(ContractError):
        AttackConfig(lambda_imr=-0.1).validate()
    with pytest.raises(ContractError):
        AttackConfig(pool_size=10, n_selected=20).validate()
    with pytest.raises(ContractError):
        AttackConfig(n_selected=10, batch_size=11, pool_size=20).validate()


def test_presets():
    p = PAPER_PRESET
    assert (p.n_prototypes, p.n_positive, p.lambda_imr, p.lambda_idr, p.momentum, p.lr, p.batch_size) == (
        500, 250, 0.3, 0.7, 0.7, 0.005, 16,
    )
    assert (p.pool_size, p.n_selected, p.epochs) == (2000, 200, 50)
    d = DESK_PRESET
    assert (d.pool_size, d.n_selected, d.epochs) == (500, 50, 50)
    p.validate()
    d.validate()


def _state(lab, cfg):
    gen = lab.generator.with_fresh_mapping(5)
    banks = Banks.fresh(Rng(6), cfg.n_prototypes, cfg.n_positive, 5, lab.target.feature_dim, cfg.momentum)
    return AttackState.create(cfg, lab.target, gen, banks)


def test_baseline_step_total_is_ce_and_banks_untouched(lab):
    cfg = baseline_of(SMALL)
    state = _state(lab, cfg)
    w0, m0 = state.banks.imr.W.data.copy(), state.banks.idr.M.data.copy()
    z = sample_latents(Rng(1), 4, lab.generator.z_dim).data
    ce, imr, idr, total = dmmia_step(z, state)
    assert total == ce
    assert imr == idr == 0.0
    assert np.array_equal(state.banks.imr.W.data, w0)
    assert np.array_equal(state.banks.idr.M.data, m0)


def test_first_step_idr_is_ln_k(lab):
    state = _state(lab, SMALL)
    z = sample_latents(Rng(1), 4, lab.generator.z_dim).data
    _, _, idr, _ = dmmia_step(z, state)
    assert abs(idr - math.log(5)) <= 1e-12


def test_step_moves_mapping_bank_and_memory(lab):
    state = _state(lab, SMALL)
    phi0 = [p.data.copy() for p in state.generator.mapping.parameters()]
    w0 = state.banks.imr.W.data.copy()
    dmmia_step(sample_latents(Rng(1), 4, lab.generator.z_dim).data, state)
    assert any(not np.array_equal(a, p.data) for a, p in zip(phi0, state.generator.mapping.parameters()))
    assert not np.array_equal(state.banks.imr.W.data, w0)
    assert state.banks.idr.written.any()
    assert not any(p.requires_grad for p in state.target.parameters())


@pytest.fixture(scope="module")
def small_run(lab):
    return run_attack(SMALL.replace(target_class=1, seed=4), lab.target, lab.generator)


def test_trajectory_length_and_nonnegative(small_run):
    cfg = small_run.config
    assert small_run.trajectory.shape == (cfg.epochs * math.ceil(cfg.n_selected / cfg.batch_size), 4)
    assert small_run.trajectory.shape[0] == 9
    assert np.all(small_run.trajectory >= 0)
    assert small_run.images.shape == (12, 28, 28)


def test_total_is_weighted_sum(small_run):
    ce, imr, idr, total = small_run.trajectory.T
    assert np.allclose(total, ce + 0.3 * imr + 0.7 * idr, rtol=1e-12, atol=0)


def test_seeded_runs_are_bit_identical(lab, small_run):
    again = run_attack(small_run.config, lab.target, lab.generator)
    assert again.trajectory.tobytes() == small_run.trajectory.tobytes()
    assert again.images.tobytes() == small_run.images.tobytes()
    assert again.trajectory_csv() == small_run.trajectory_csv()


def test_different_seed_differs(lab, small_run):
    other = run_attack(small_run.config.replace(seed=5), lab.target, lab.generator)
    assert other.trajectory.tobytes() != small_run.trajectory.tobytes()


def test_synthesis_checksum_unchanged(lab, small_run):
    assert small_run.synthesis_checksum == lab.generator.synthesis_checksum()


def test_zero_weights_match_pure_ce_bitwise(lab):
    cfg = SMALL.replace(lambda_imr=0.0, lambda_idr=0.0, seed=8)
    a = run_attack(cfg, lab.target, lab.generator)
    b = run_attack(baseline_of(cfg), lab.target, lab.generator)
    assert a.trajectory[:, 0].tobytes() == b.trajectory[:, 0].tobytes()
    assert a.trajectory[:, 3].tobytes() == b.trajectory[:, 0].tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.mapping_state, b.mapping_state))
    assert a.images.tobytes() == b.images.tobytes()


def _first_last_epoch_ce(result):
    per_epoch = result.config.steps_per_epoch
    ce = result.trajectory[:, 0]
    return ce[:per_epoch].mean(), ce[-per_epoch:].mean()


def test_ce_decreases_over_training(lab):
    for seed in range(3):
        first, last = _first_last_epoch_ce(run_attack(SMALL.replace(epochs=10, seed=seed), lab.target, lab.generator))
        assert last < first


def test_normalized_features_decrease_ce_on_every_class(lab):
    cfg = SMALL.replace(epochs=10, normalize_features=True)
    for c in range(5):
        first, last = _first_last_epoch_ce(run_attack(cfg.replace(seed=c, target_class=c), lab.target, lab.generator))
        assert last < first


def test_target_class_out_of_range(lab):
    with pytest.raises(ContractError):
        run_attack(SMALL.replace(target_class=5), lab.target, lab.generator)


def test_prototype_cost_scales_linearly():
    assert prototype_macs(5, 100, 128) == 105 * 128
    assert prototype_macs(10, 200, 128) == 2 * prototype_macs(5, 100, 128)
    assert prototype_macs(5, 100, 256) == 2 * prototype_macs(5, 100, 128)
