import json

import numpy as np
import pytest

from stochlqr import adp, linops, riccati
from stochlqr.errors import DivergenceError, ExcitationError
from stochlqr.model import LinearStochasticSystem
from stochlqr.sde import (SampledPlant, Trajectory, default_exploration,
                          simulate_batch, zero_exploration)


def _scalar_system(f=0.0, g=0.0):
    return LinearStochasticSystem(
        A=np.array([[-1.0]]), B=np.array([[1.0]]),
        F=(np.array([[f]]),) if f else (),
        G=(np.array([[g]]),) if g else (),
    )


def _noisy_2x2():
    a = np.array([[-1.0, 0.4], [0.0, -2.0]])
    b = np.array([[0.0], [1.0]])
    return LinearStochasticSystem(
        A=a, B=b,
        F=(np.array([[0.15, 0.0]]),),
        G=(np.array([[0.2]]),),
        Q=np.eye(2), R=np.eye(1),
    )


def _hand_trajectory():
    # one Euler step of nothing in particular; numbers chosen for easy sums
    return Trajectory(
        h=0.5,
        times=np.array([0.0, 0.5]),
        states=np.array([[1.0], [1.0]]),
        inputs=np.array([[2.0]]),
        dw_hat=np.array([[0.3]]),
        dw1=np.zeros((1, 0)),
        dw2=np.zeros((1, 1)),
    )


def test_build_data_matrices_single_step_values():
    dm = adp.build_data_matrices(_hand_trajectory(), [(0.0, 0.5)])
    assert dm.delta_xx.shape == (1, 1)
    assert abs(dm.delta_xx[0, 0] - 0.0) < 1e-15          # 1*1 - 1*1
    assert abs(dm.int_xx[0, 0] - 0.5) < 1e-15            # x^2 h = 1*0.5
    assert abs(dm.int_uu[0, 0] - 2.0) < 1e-15            # u^2 h = 4*0.5
    assert abs(dm.int_xw[0, 0] - 0.3) < 1e-15            # x dw_hat, no h factor
    assert dm.interval_bounds == ((0.0, 0.5),)
    assert dm.h == 0.5


def test_build_data_matrices_rejects_bad_intervals():
    traj = _hand_trajectory()
    with pytest.raises(ValueError, match="sampling grid"):
        adp.build_data_matrices(traj, [(0.0, 0.3)])
    with pytest.raises(ValueError, match="empty interval"):
        adp.build_data_matrices(traj, [(0.5, 0.5)])
    with pytest.raises(ValueError, match="at least one interval"):
        adp.build_data_matrices(traj, [])
    with pytest.raises(ValueError, match="gain must have shape"):
        adp.build_data_matrices(traj, [(0.0, 0.5)], gain=np.zeros((2, 1)))


def test_grid_index_tolerates_roundoff():
    traj = _hand_trajectory()
    dm = adp.build_data_matrices(traj, [(1e-13, 0.5 + 1e-13)])
    assert abs(dm.int_xx[0, 0] - 0.5) < 1e-15


def test_assemble_linear_system_zero_gain():
    dm = adp.build_data_matrices(_hand_trajectory(), [(0.0, 0.5)])
    theta, xi = adp.assemble_linear_system(dm, np.zeros((1, 1)),
                                           np.array([[2.0]]), np.array([[1.0]]))
    # [delta_xx, -2 I_xw, -I_uu] and xi = -I_xx vec(Q) under K = 0
    assert np.allclose(theta, [[0.0, -0.6, -2.0]])
    assert np.allclose(xi, [-1.0])


def test_assemble_linear_system_gain_term():
    dm = adp.build_data_matrices(_hand_trajectory(), [(0.0, 0.5)])
    k = np.array([[0.7]])
    theta, xi = adp.assemble_linear_system(dm, k, np.array([[2.0]]), np.array([[1.0]]))
    # third block becomes I_xx k^2 - I_uu; xi picks up the k^2 r penalty
    assert np.allclose(theta, [[0.0, -0.6, 0.5 * 0.49 - 2.0]])
    assert np.allclose(xi, [-0.5 * (2.0 + 0.49)])


def test_average_over_runs_mean_and_empty():
    t1, x1 = np.array([[1.0, 2.0]]), np.array([3.0])
    t2, x2 = np.array([[3.0, 6.0]]), np.array([5.0])
    theta, xi = adp.average_over_runs([(t1, x1), (t2, x2)])
    assert np.allclose(theta, [[2.0, 4.0]])
    assert np.allclose(xi, [4.0])
    with pytest.raises(ValueError, match="no runs"):
        adp.average_over_runs([])


def _commutation(n):
    # K vec(A) = vec(A^T) in column-major vec coordinates
    k = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            k[j + i * n, i + j * n] = 1.0
    return k


def _synthetic_regression(rng, n, m, rows):
    """Random consistent regression whose exact solution has symmetric P
    and Sigma blocks (the physical parameterization)."""
    p_true = rng.standard_normal((n, n))
    p_true = p_true + p_true.T + 2.0 * n * np.eye(n)
    btp_true = rng.standard_normal((m, n))
    sig_true = rng.standard_normal((m, m))
    sig_true = sig_true @ sig_true.T + np.eye(m)
    s_true = np.concatenate([linops.vec(p_true), linops.vec(btp_true),
                             linops.vec(sig_true)])
    theta = rng.standard_normal((rows, s_true.size))
    # fold the (i,j)/(j,i) coefficients together so that, like the physical
    # data, theta only sees the symmetric parts of P and Sigma
    theta[:, : n * n] = 0.5 * (theta[:, : n * n] + theta[:, : n * n]
                               @ _commutation(n))
    theta[:, n * n + n * m:] = 0.5 * (theta[:, n * n + n * m:]
                                      + theta[:, n * n + n * m:] @ _commutation(m))
    xi = theta @ s_true
    return theta, xi, p_true, btp_true, sig_true


def test_solve_policy_evaluation_recovers_synthetic_solution():
    rng = np.random.default_rng(5)
    n, m = 2, 1
    theta, xi, p_true, btp_true, sig_true = _synthetic_regression(rng, n, m, 20)
    r = np.eye(m)
    for mode in ("least-squares", "symmetric"):
        ev = adp.solve_policy_evaluation(theta, xi, n, m, r, mode=mode)
        assert np.allclose(ev.P, p_true, atol=1e-10)
        assert np.allclose(ev.BtP, btp_true, atol=1e-10)
        assert np.allclose(ev.Sigma, sig_true, atol=1e-10)
        assert np.allclose(ev.K_next,
                           np.linalg.solve(sig_true + r, btp_true), atol=1e-9)
        assert np.allclose(
            ev.params,
            np.concatenate([linops.vec(p_true), linops.vec(btp_true),
                            linops.vec(sig_true)]), atol=1e-10)


def test_solve_policy_evaluation_square_mode():
    rng = np.random.default_rng(7)
    n = m = 1
    s_true = np.array([0.4, 0.4, 0.16])
    theta = rng.standard_normal((3, 3))
    ev = adp.solve_policy_evaluation(theta, theta @ s_true, n, m,
                                     np.eye(1), mode="square")
    assert np.allclose(ev.params, s_true, atol=1e-12)

    singular = np.ones((3, 3))
    with pytest.raises(ExcitationError, match="singular"):
        adp.solve_policy_evaluation(singular, np.ones(3), n, m,
                                    np.eye(1), mode="square")
    with pytest.raises(ValueError, match="square mode needs exactly"):
        adp.solve_policy_evaluation(np.ones((4, 3)), np.ones(4), n, m,
                                    np.eye(1), mode="square")


def test_solve_policy_evaluation_rank_failure():
    rng = np.random.default_rng(9)
    theta, xi, *_ = _synthetic_regression(rng, 2, 1, 20)
    theta[:, :4] = 0.0  # P columns unobservable -> rank below identifiable count
    with pytest.raises(ExcitationError, match="persistent excitation"):
        adp.solve_policy_evaluation(theta, xi, 2, 1, np.eye(1))


def test_solve_policy_evaluation_condition_warning():
    theta = np.diag([1.0, 1.0, 2e-9])
    s_true = np.array([0.5, 0.5, 0.25])
    with pytest.warns(RuntimeWarning, match="ill conditioned"):
        ev = adp.solve_policy_evaluation(theta, theta @ s_true, 1, 1, np.eye(1))
    assert ev.condition > 1e8
    assert np.allclose(ev.params, s_true, atol=1e-6)


def test_solve_policy_evaluation_input_validation():
    with pytest.raises(ValueError, match="columns"):
        adp.solve_policy_evaluation(np.ones((5, 4)), np.ones(5), 1, 1, np.eye(1))
    with pytest.raises(ValueError, match="row counts"):
        adp.solve_policy_evaluation(np.ones((5, 3)), np.ones(4), 1, 1, np.eye(1))
    with pytest.raises(ValueError, match="unknown mode"):
        adp.solve_policy_evaluation(np.eye(3), np.ones(3), 1, 1, np.eye(1),
                                    mode="banana")


def test_ito_convention_left_endpoint():
    """I_xw built from left endpoints is unbiased for the analytic
    expectation; the right-endpoint variant picks up an O(1) bias through
    the quadratic covariation and must NOT match."""
    system = LinearStochasticSystem(
        A=np.array([[-1.0, 0.4], [0.0, -2.0]]), B=np.array([[0.0], [1.0]]),
        F=(np.array([[0.6, 0.0]]),), G=(np.array([[0.7]]),),
    )
    gain = np.array([[0.3, 0.5]])
    explore = default_exploration(1, amplitude=0.8, count=4)
    l, delta_t, h = 4, 0.2, 0.005
    duration = l * delta_t
    intervals = [(i * delta_t, (i + 1) * delta_t) for i in range(l)]
    x0 = np.array([1.0, -0.5])

    n_paths = 512
    keys = [(r,) for r in range(n_paths)]
    batch = simulate_batch(system, gain, explore, 0.0, duration, h, 77, keys, x0=x0)

    exact = adp.expected_data_matrices(system, gain, explore, x0, l, delta_t)

    left, right = [], []
    for idx in range(n_paths):
        traj = batch.path(idx)
        dm = adp.build_data_matrices(traj, intervals)
        left.append(dm.int_xw)
        rows = []
        for (a, b) in intervals:
            ia = int(round(a / h))
            ib = int(round(b / h))
            rows.append(np.einsum("si,sj->ij", traj.states[ia + 1: ib + 1],
                                  traj.dw_hat[ia:ib]).ravel())
        right.append(np.asarray(rows))
    left = np.asarray(left)
    right = np.asarray(right)

    se = left.std(axis=0, ddof=1) / np.sqrt(n_paths) + 1e-12
    z_left = np.abs(left.mean(axis=0) - exact.int_xw) / se
    assert z_left.max() < 4.5

    se_r = right.std(axis=0, ddof=1) / np.sqrt(n_paths) + 1e-12
    z_right = np.abs(right.mean(axis=0) - exact.int_xw) / se_r
    assert z_right.max() > 8.0


class _StrictPlant:
    """Exposes exactly the black-box interface and nothing else; any other
    attribute access is a test failure (the learner must stay model-blind)."""

    _ALLOWED = {"n", "m", "simulate_batch"}

    def __init__(self, system, x0=None):
        object.__setattr__(self, "_inner", SampledPlant(system, x0=x0))

    def __getattr__(self, name):
        if name not in self._ALLOWED:
            raise AssertionError(f"learner touched non-interface attribute {name!r}")
        return getattr(object.__getattribute__(self, "_inner"), name)


def _tiny_adp_config(**kw):
    base = dict(h=0.02, delta_t=0.1, num_intervals=6, n_mc=8, max_iter=3,
                tol=1e-12, seed=3)
    base.update(kw)
    return adp.AdpConfig(**base)


def test_run_adp_is_model_blind_and_deterministic():
    system = _scalar_system(g=0.3)
    plant = _StrictPlant(system, x0=np.array([1.0]))
    explore = default_exploration(1, amplitude=0.6, count=4)
    k0 = np.zeros((1, 1))

    res1 = adp.run_adp(plant, k0, system.Q, system.R, explore, _tiny_adp_config())
    res2 = adp.run_adp(plant, k0, system.Q, system.R, explore, _tiny_adp_config())
    assert np.array_equal(res1.P_final, res2.P_final)
    assert np.array_equal(res1.K_final, res2.K_final)
    assert res1.iterations == 3

    res3 = adp.run_adp(plant, k0, system.Q, system.R, explore,
                       _tiny_adp_config(seed=4))
    assert not np.array_equal(res1.P_final, res3.P_final)


def test_run_adp_path_batch_invariance():
    system = _scalar_system(g=0.3)
    explore = default_exploration(1, amplitude=0.6, count=4)
    k0 = np.zeros((1, 1))
    outs = []
    for batch in (2, 5, 128):
        plant = SampledPlant(system, x0=np.array([1.0]))
        res = adp.run_adp(plant, k0, system.Q, system.R, explore,
                          _tiny_adp_config(path_batch=batch))
        outs.append(res.P_final)
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], outs[2])


def test_run_adp_seed_key_isolation():
    # disjoint seed_key prefixes must give independent (different) data
    system = _scalar_system(g=0.3)
    explore = default_exploration(1, amplitude=0.6, count=4)
    k0 = np.zeros((1, 1))
    plant = SampledPlant(system, x0=np.array([1.0]))
    res_a = adp.run_adp(plant, k0, system.Q, system.R, explore,
                        _tiny_adp_config(seed_key=(0,)))
    res_b = adp.run_adp(plant, k0, system.Q, system.R, explore,
                        _tiny_adp_config(seed_key=(1,)))
    assert not np.array_equal(res_a.P_final, res_b.P_final)


def test_run_adp_requires_excitation():
    system = _scalar_system(g=0.3)
    plant = SampledPlant(system)  # origin start, no exploration: data is all zero
    with pytest.raises(ExcitationError):
        adp.run_adp(plant, np.zeros((1, 1)), system.Q, system.R,
                    zero_exploration(1), _tiny_adp_config())


def test_run_adp_divergence_guard():
    # open-loop unstable scalar plant: by t = 4 the Euler recursion passes
    # the state guard, which must surface as DivergenceError (after the
    # admissibility warning for the zero gain)
    unstable = LinearStochasticSystem(A=np.array([[6.0]]), B=np.array([[0.1]]))
    plant = SampledPlant(unstable, x0=np.array([1.0]))
    explore = default_exploration(1, amplitude=0.5, count=3)
    cfg = _tiny_adp_config(h=0.01, delta_t=0.1, num_intervals=40, max_iter=2)
    with pytest.warns(RuntimeWarning):
        with pytest.raises(DivergenceError):
            adp.run_adp(plant, np.zeros((1, 1)), unstable.Q, unstable.R,
                        explore, cfg)


def test_run_adp_gain_monitor_and_groups():
    system = _scalar_system(g=0.3)
    plant = SampledPlant(system, x0=np.array([1.0]))
    explore = default_exploration(1, amplitude=0.6, count=4)
    seen = []
    res = adp.run_adp(plant, np.zeros((1, 1)), system.Q, system.R, explore,
                      _tiny_adp_config(stderr_groups=4),
                      gain_monitor=lambda k, ev: seen.append((k, ev.K_next.copy())))
    assert [k for k, _ in seen] == list(range(res.iterations))
    assert len(res.group_P_final) == 4
    spread = np.std([p[0, 0] for p in res.group_P_final])
    assert np.isfinite(spread)


def test_adp_result_io(tmp_path):
    system = _scalar_system(g=0.3)
    plant = SampledPlant(system, x0=np.array([1.0]))
    explore = default_exploration(1, amplitude=0.6, count=4)
    res = adp.run_adp(plant, np.zeros((1, 1)), system.Q, system.R, explore,
                      _tiny_adp_config())
    jpath = tmp_path / "run.json"
    cpath = tmp_path / "run.csv"
    res.write_json(jpath, oracle=np.array([[0.4]]), config_echo={"h": 0.02})
    res.write_csv(cpath)
    doc = json.loads(jpath.read_text())
    assert doc["iterations"] == res.iterations
    assert doc["config"] == {"h": 0.02}
    assert all("err_P_fro" in it for it in doc["iterates"])
    lines = cpath.read_text().strip().splitlines()
    assert lines[0] == "iter,P_fro,K_fro,step_fro,condition"
    assert len(lines) == 1 + res.iterations


def test_expected_data_matrices_zero_case():
    system = _scalar_system(g=0.3)
    dm = adp.expected_data_matrices(system, np.zeros((1, 1)), zero_exploration(1),
                                    None, 3, 0.25)
    for block in (dm.delta_xx, dm.int_xx, dm.int_uu, dm.int_xw):
        assert np.allclose(block, 0.0, atol=1e-13)
    assert dm.h == 0.0

    noisy = default_exploration(1, noise_std=0.1)
    with pytest.raises(ValueError, match="dither-free"):
        adp.expected_data_matrices(system, np.zeros((1, 1)), noisy, None, 3, 0.25)


def test_run_pi_exact_matches_model_iteration():
    """Policy iteration on exact expected data must walk the same P/K
    sequence as the model-based recursion, step by step."""
    system = _noisy_2x2()
    explore = default_exploration(1, amplitude=0.8, count=4)
    x0 = np.array([1.0, -0.5])
    res = adp.run_pi_exact(system, np.zeros((1, 2)), explore, x0,
                           num_intervals=7, delta_t=0.25, max_iter=5, tol=0.0)
    gain = np.zeros((1, 2))
    for k, ev in enumerate(res.iterates):
        p_model, k_model = riccati.kleinman_step(system, gain)
        assert np.linalg.norm(ev.P - p_model, "fro") <= 1e-8, f"iter {k}"
        assert np.linalg.norm(ev.K_next - k_model, "fro") <= 1e-8, f"iter {k}"
        gain = k_model


def test_run_pi_exact_reaches_riccati_solution():
    system = _noisy_2x2()
    explore = default_exploration(1, amplitude=0.8, count=4)
    res = adp.run_pi_exact(system, np.zeros((1, 2)), explore,
                           np.array([1.0, -0.5]), delta_t=0.25,
                           max_iter=12, tol=1e-12)
    sol = riccati.solve(system, np.zeros((1, 2)))
    assert res.converged
    assert np.linalg.norm(res.P_final - sol.P_star, "fro") < 1e-8
    assert np.linalg.norm(res.K_final - sol.K_star, "fro") < 1e-8
