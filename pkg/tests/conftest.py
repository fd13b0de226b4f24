import numpy as np
import pytest

import ddmpc
from ddmpc.mpc import MpcConfig, MpcVariant


@pytest.fixture(scope="session")
def cstr():
    return ddmpc.cstr_example()


@pytest.fixture(scope="session")
def y_star(cstr):
    """Equilibrium output of the benchmark plant for the setpoint input 0.8."""
    return ddmpc.equilibrium_output(cstr, 0.8)


@pytest.fixture(scope="session")
def clean_dataset(cstr):
    return ddmpc.generate_dataset(cstr, 200, 0.0, 0.9, 0.0, seed=42)


@pytest.fixture(scope="session")
def noisy_dataset(cstr):
    return ddmpc.generate_dataset(cstr, 200, 0.0, 0.9, 1e-3, seed=42)


@pytest.fixture(scope="session")
def sv_config(y_star):
    """Factory for the benchmark controller configuration.

    Defaults mirror the reproduced study: L=20, l=2, Q=1, R=0.01, input box
    [0, 0.9], noise bound 1e-3 with regularization products 1e-2 and 1e5.
    """
    def make(variant=MpcVariant.ROBUST, eps_bar=1e-3, T_sim=500, **overrides):
        base = dict(
            L=20, l=2, Q=[[1.0]], R=[[0.01]], u_min=[0.0], u_max=[0.9],
            u_setpoint=[0.8], y_setpoint=y_star,
            lambda_alpha_times_eps=1e-2, lambda_sigma_over_eps=1e5,
            eps_bar=eps_bar, T_sim=T_sim,
        )
        if variant is MpcVariant.NOMINAL:
            base.update(eps_bar=0.0, lambda_alpha_times_eps=0.0,
                        lambda_sigma_over_eps=0.0)
        base.update(overrides)
        return MpcConfig(variant=variant, **base)
    return make


@pytest.fixture(scope="session")
def equilibrium_window(cstr, y_star):
    """Constant (u, y) window sitting exactly at the setpoint equilibrium."""
    x_s = np.linalg.solve(np.eye(cstr.n) - cstr.A, (cstr.B @ [0.8]))
    u_win = np.full((2, 1), 0.8)
    y_win = np.tile(y_star, (2, 1))
    return u_win, y_win, x_s
