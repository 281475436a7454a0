import numpy as np

from lagvid import dynamics, selftest


def _flipped_coriolis(dD_dq, qdot):
    # sign error on the second Christoffel term
    first = np.einsum("...kji,...i,...j->...k", dD_dq, qdot, qdot)
    second = np.einsum("...ijk,...i,...j->...k", dD_dq, qdot, qdot)
    return first + 0.5 * second


def test_fresh_build_passes_every_check():
    results = selftest.run_all()
    assert [r.name for r in results] == [
        "analytic_closure", "coriolis_vs_fd_oracle", "energy_conservation_rk4",
        "inertia_spd", "state_loss_gradients", "video_loss_gradients",
    ]
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_coriolis_sign_mutation_is_caught():
    assert not selftest.check_coriolis(_flipped_coriolis).passed
    assert selftest.check_coriolis(dynamics.coriolis_vector).passed


def test_zero_regularizer_mutation_is_caught():
    result = selftest.check_spd(lam=0.0)
    assert not result.passed
    assert selftest.min_eigen_margin(lam=0.0) < -1.0


def test_brute_force_oracle_on_constant_inertia():
    dD = np.zeros((2, 2, 2))
    assert np.all(selftest.brute_force_coriolis(dD, np.array([1.0, 2.0])) == 0)


def test_result_line_format():
    line = selftest.CheckResult("x", True, 1.5e-7, 1e-5, 0.25).line()
    assert line.startswith("PASS  x") and "tol 1e-05" in line


def test_exceptions_count_as_failures():
    def broken(dD_dq, qdot):
        raise ValueError("boom")

    r = selftest.check_coriolis(broken)
    assert not r.passed and r.value == float("inf")
