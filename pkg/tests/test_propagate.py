import numpy as np
import pytest
import scipy.linalg as sla

from hds.model import DriveSpec, PauliTerm, SystemSpec, UP_X
from hds.noise import NoiseSpec, OUParams, PhaseJitterParams, TimeGrid, build_realization
from hds.observables import Expectation, StateFidelity
from hds.propagate import (EnsembleConfig, PropagationConfig, _lanczos_expm, evolve_block,
                           evolve_trajectory, make_engine, run_ensemble)
from hds.spinops import SIGMA, TensorLayout, basis_state, kron_states, pauli_string

TWO_PI = 2 * np.pi


def test_config_validation():
    with pytest.raises(ValueError):
        PropagationConfig(0.3, 1.0)
    with pytest.raises(ValueError):
        PropagationConfig(-0.1, 1.0)
    cfg = PropagationConfig(0.1, 1.0, store_every=3)
    assert cfg.n_steps == 10
    assert list(cfg.store_steps) == [0, 3, 6, 9, 10]


def test_step_rule_enforced():
    om = TWO_PI * 3.5
    sys = SystemSpec(TensorLayout(1), first_drive=(DriveSpec(om, 0.0, (0,)),))
    with pytest.raises(ValueError, match="exceeds"):
        evolve_trajectory(sys, None, basis_state([0]), PropagationConfig(0.05, 1.0))


def test_zero_hamiltonian_keeps_state():
    sys = SystemSpec(TensorLayout(2))
    psi0 = kron_states(UP_X, basis_state([1]))
    _, states = evolve_trajectory(sys, None, psi0, PropagationConfig(0.5, 5.0))
    assert np.allclose(states, psi0)


@pytest.mark.parametrize("method", ["expm_piecewise", "rk4"])
def test_rabi_formula(method):
    om = 2.0
    sys = SystemSpec(TensorLayout(1), first_drive=(DriveSpec(om, 0.0, (0,)),))
    times, states = evolve_trajectory(sys, None, basis_state([0]), PropagationConfig(0.01, 5.0, 10, method))
    assert np.max(np.abs(states[:, 0] - np.cos(om * times / 2))) < 1e-8


def test_zz_phase_evolution():
    a = 0.9
    sys = SystemSpec(TensorLayout(2), np.array([[0, a], [a, 0]]))
    psi0 = kron_states(UP_X, UP_X)
    times, states = evolve_trajectory(sys, None, psi0, PropagationConfig(0.1, 8.0, 4))
    energies = a / 4 * np.array([1, -1, -1, 1])
    exact = np.exp(-1j * np.outer(times, energies)) * psi0
    assert np.max(np.abs(states - exact)) < 1e-12


def _random_chain(n, seed):
    rng = np.random.default_rng(seed)
    lay = TensorLayout(n)
    terms = []
    for k in range(n):
        terms.append(PauliTerm(((k, "x"),), float(rng.normal())))
        terms.append(PauliTerm(((k, "z"),), float(rng.normal())))
    for k in range(n - 1):
        terms.append(PauliTerm(((k, "z"), (k + 1, "z")), float(rng.normal())))
    return SystemSpec(lay, extra_terms=tuple(terms))


def test_sparse_path_matches_dense_exponential():
    sys = _random_chain(8, 3)
    assert sys.layout.dim == 256
    H = sum(t.coeff * pauli_string(t.paulis, sys.layout).toarray() for t in sys.extra_terms)
    rng = np.random.default_rng(0)
    psi0 = rng.normal(size=256) + 1j * rng.normal(size=256)
    psi0 /= np.linalg.norm(psi0)
    dt = 1.0 / (20 * sys.max_frequency())
    times, states = evolve_trajectory(sys, None, psi0, PropagationConfig(dt, 20 * dt, 5))
    w, v = np.linalg.eigh(H)
    for t, s in zip(times, states):
        exact = v @ (np.exp(-1j * w * t) * (v.conj().T @ psi0))
        assert np.linalg.norm(s - exact) < 1e-9


def test_lanczos_kernel_against_expm():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(60, 60)) + 1j * rng.normal(size=(60, 60))
    H = (A + A.conj().T) / 2
    V = rng.normal(size=(60, 3)) + 1j * rng.normal(size=(60, 3))
    V /= np.linalg.norm(V, axis=0)
    log = []
    out = _lanczos_expm(lambda X: H @ X, V, 0.05, 1e-12, 40, log)
    exact = sla.expm(-1j * 0.05 * H) @ V
    assert np.max(np.abs(out - exact)) < 1e-11
    assert log and max(log) <= 40


def _noisy_pair():
    lay = TensorLayout(2, ((0, 1),))
    noise = NoiseSpec.uniform(2, OUParams(TWO_PI * 0.2, 20.0), OUParams(0.04, 20.0),
                              PhaseJitterParams(np.deg2rad(2), 20.0))
    return SystemSpec(lay, first_drive=(DriveSpec(TWO_PI * 1.0, 0.0, (0, 1)),), noise=noise)


def test_single_trajectory_ensemble_matches_evolve_trajectory():
    sys = _noisy_pair()
    psi0 = kron_states(UP_X, UP_X)
    prop = PropagationConfig(0.02, 2.0, 10)
    rec = run_ensemble(sys, None, psi0, [StateFidelity("f", psi0)], prop, EnsembleConfig(1, 77))
    from hds.noise import derive_seed
    real = build_realization(sys, prop.grid, derive_seed(77, 0))
    _, states = evolve_trajectory(sys, real, psi0, prop)
    assert np.allclose(rec.means["f"], np.abs(states @ psi0.conj()) ** 2, atol=1e-14)


def test_zero_noise_has_zero_stderr():
    lay = TensorLayout(1)
    sys = SystemSpec(lay, first_drive=(DriveSpec(1.0, 0.0, (0,)),))
    z = Expectation("z", pauli_string([(0, "z")], lay))
    rec = run_ensemble(sys, None, basis_state([0]), [z], PropagationConfig(0.05, 2.0, 4), EnsembleConfig(5))
    assert not np.any(rec.stderr["z"])


def test_stderr_definition_and_worker_independence():
    sys = _noisy_pair()
    psi0 = kron_states(UP_X, basis_state([0]))
    prop = PropagationConfig(0.02, 4.0, 20)
    obs = [StateFidelity("f", psi0)]
    one = run_ensemble(sys, None, psi0, obs, prop, EnsembleConfig(12, 3, workers=1, block=4))
    two = run_ensemble(sys, None, psi0, obs, prop, EnsembleConfig(12, 3, workers=2, block=4))
    assert np.array_equal(one.means["f"], two.means["f"])
    assert np.array_equal(one.stderr["f"], two.stderr["f"])
    samples = one.samples["f"]
    assert np.allclose(one.stderr["f"], samples.std(axis=1, ddof=1) / np.sqrt(12))


def test_block_size_does_not_change_results():
    sys = _noisy_pair()
    psi0 = kron_states(UP_X, basis_state([0]))
    prop = PropagationConfig(0.02, 2.0, 20)
    obs = [StateFidelity("f", psi0)]
    a = run_ensemble(sys, None, psi0, obs, prop, EnsembleConfig(6, 3, block=6))
    b = run_ensemble(sys, None, psi0, obs, prop, EnsembleConfig(6, 3, block=2))
    assert np.max(np.abs(a.means["f"] - b.means["f"])) < 1e-13


def test_norm_drift_reported():
    sys = _noisy_pair()
    psi0 = kron_states(UP_X, UP_X)
    diag = evolve_block(sys, [None], psi0, PropagationConfig(0.02, 1.0))
    assert diag["max_norm_drift"] < 1e-12


def test_bad_initial_state():
    sys = SystemSpec(TensorLayout(1))
    with pytest.raises(ValueError):
        evolve_trajectory(sys, None, np.array([1.0, 1.0]), PropagationConfig(0.1, 1.0))
