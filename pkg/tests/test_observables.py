from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sympacool import ValidationError
from sympacool.dynamics import EnsembleResult
from sympacool.observables import (
    BipartitionSpec,
    DissipationMethod,
    clip_density,
    dissipated_energy,
    epsilon,
    expectation,
    fidelity,
    manifold_fidelity_batch,
    negativity,
    partial_trace,
)
from sympacool.operators import SIGMA_X, SIGMA_Z, kron_states, product_state
from sympacool.spectrum import SpectrumInfo

from conftest import random_density

SINGLET = (product_state("ud") - product_state("du")) / np.sqrt(2)


def test_singlet_negativity():
    split = BipartitionSpec(traced_sites=(), block_a=(0,))
    assert negativity(SINGLET, split) == pytest.approx(0.5, abs=1e-12)


def test_product_state_has_no_negativity():
    psi = product_state("udu")
    assert negativity(psi) == pytest.approx(0.0, abs=1e-12)


def test_werner_state_threshold():
    split = BipartitionSpec(traced_sites=(), block_a=(0,))
    for p, expected in [(0.2, 0.0), (1 / 3, 0.0), (0.8, (3 * 0.8 - 1) / 4)]:
        rho = p * np.outer(SINGLET, SINGLET) + (1 - p) * np.eye(4) / 4
        assert negativity(rho, split) == pytest.approx(expected, abs=1e-12)


def test_default_bipartition_traces_bath():
    # system singlet on sites 0,1 with a bath spin on site 2
    psi = kron_states(SINGLET, product_state("d"))
    assert negativity(psi) == pytest.approx(0.5, abs=1e-12)
    traced, remaining, block = BipartitionSpec().resolve(5)
    assert traced == (4,) and remaining == (0, 1, 2, 3) and block == (0, 1)


def test_bipartition_validation():
    with pytest.raises(ValidationError):
        BipartitionSpec(block_a=(0, 1, 2)).resolve(4)
    with pytest.raises(ValidationError):
        BipartitionSpec(traced_sites=(7,)).resolve(4)


def test_negativity_rejects_bad_density():
    with pytest.raises(ValidationError):
        negativity(np.eye(4) / 2)
    with pytest.raises(ValidationError):
        negativity(np.eye(3) / 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_negativity_is_nonnegative_and_bounded(seed):
    rho = random_density(8, np.random.default_rng(seed))
    n = negativity(rho, BipartitionSpec(traced_sites=(), block_a=(0,)))
    assert 0.0 <= n <= 0.5 + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partial_trace_preserves_trace_and_local_expectations(seed):
    rng = np.random.default_rng(seed)
    rho = random_density(8, rng)
    reduced = partial_trace(rho, (0, 2), 3)
    assert np.trace(reduced).real == pytest.approx(1.0)
    op = np.kron(SIGMA_Z, SIGMA_X)
    full = np.kron(np.kron(SIGMA_Z, np.eye(2)), SIGMA_X)
    assert expectation(reduced, op) == pytest.approx(expectation(rho, full), abs=1e-12)


def test_expectation_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        expectation(np.array([1, 1j]) / np.sqrt(2), np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValidationError):
        expectation(np.ones(3), np.eye(2))


def test_fidelity_is_clipped():
    assert fidelity(np.array([1.0, 0.0]), np.diag([1.0 + 1e-14, 0])) == 1.0


def test_manifold_fidelity_batch_traces_bath():
    manifold = np.eye(4)[:, :1]  # system ground state |uu>
    evaluate = manifold_fidelity_batch(manifold)
    psi = np.stack([kron_states(product_state("uu"), product_state("d")),
                    kron_states((product_state("uu") + product_state("dd")) / np.sqrt(2), product_state("u"))], axis=1)
    np.testing.assert_allclose(evaluate(psi), [1.0, 0.5])


def test_epsilon_units():
    spec = SpectrumInfo(np.array([-2.0, 0.0]), np.eye(2)[:, :1], -2.0, 2.0, 1)
    assert epsilon(-1.0, spec) == pytest.approx(0.5)
    np.testing.assert_allclose(epsilon(np.array([-2.0, 0.0]), spec), [0.0, 1.0])


def _fake_ensemble(counts, integrals, times):
    n = len(counts)
    return EnsembleResult(times=times, mean={"bath_up": np.zeros_like(times)}, sem={"bath_up": np.zeros_like(times)},
                          n_traj=n, master_seed=0, jump_counts=np.asarray(counts)[:, None],
                          scalars={"integral_bath_up": np.asarray(integrals, dtype=float)})


def test_dissipated_energy_estimators():
    ens = _fake_ensemble([1, 2, 3, 2], [1.0, 1.0, 1.5, 0.5], np.linspace(0, 1, 5))
    est = dissipated_energy(ens, delta=3.0, gamma=2.0)
    assert est.n_jump_count == pytest.approx(2.0)
    assert est.n_jump_integral == pytest.approx(2.0)
    assert est.e_dis == pytest.approx(6.0)
    assert est.consistent()
    alt = dissipated_energy(ens, 3.0, 2.0, method=DissipationMethod.UP_POPULATION_INTEGRAL)
    assert alt.e_dis == pytest.approx(est.e_dis_integral)


def test_clip_density_projects_onto_states():
    rho = np.diag([1.05, -0.05])
    out, clipped = clip_density(rho)
    assert clipped == pytest.approx(0.05)
    assert np.linalg.eigvalsh(out).min() >= 0
    assert np.trace(out).real == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_negativity_invariant_under_block_swap(seed):
    rho = random_density(16, np.random.default_rng(seed))
    a = negativity(rho, BipartitionSpec(traced_sites=(), block_a=(0, 2)))
    b = negativity(rho, BipartitionSpec(traced_sites=(), block_a=(1, 3)))
    assert a == pytest.approx(b, abs=1e-8)


def test_ensemble_rho_of_pure_evolution_reproduces_pure_negativity():
    from sympacool.dynamics import TrajectoryProblem, run_ensemble, uniform_grid
    from sympacool.operators import build_system_hamiltonian
    from sympacool.observables import negativity_series
    from sympacool import ModelSpec

    h = build_system_hamiltonian(ModelSpec("heisenberg", 3))
    psi0 = product_state("udu")
    problem = TrajectoryProblem(h, [], psi0, uniform_grid(2.0, 21), rho_index=(0, 10, 20))
    ens = run_ensemble(problem, 1000, master_seed=1)
    series = negativity_series(ens, BipartitionSpec(traced_sites=(), block_a=(0,)), t_p=2.0)
    from scipy.linalg import expm

    for t, value in zip(series.times, series.values):
        psi = expm(-1j * dense_h(h) * t) @ psi0
        assert value == pytest.approx(negativity(psi, BipartitionSpec(traced_sites=(), block_a=(0,))), abs=1e-6)
    np.testing.assert_allclose(series.normalized_times, [0.0, 0.5, 1.0])


def dense_h(h):
    from sympacool.operators import dense

    return dense(h)


def test_negativity_series_needs_samples():
    from sympacool.observables import negativity_series

    ens = _fake_ensemble([1], [1.0], np.linspace(0, 1, 3))
    with pytest.raises(ValidationError):
        negativity_series(ens)
