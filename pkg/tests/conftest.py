import numpy as np
import pytest

from robflat.nn import ParamVector, init_params, mlp


def small_net(seed=0, hidden=(5,), k=3, d=4, activation="relu", batchnorm="none"):
    spec = mlp(d, list(hidden), k, activation=activation, batchnorm=batchnorm)
    params = init_params(spec, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    # non-zero biases and BN affine params so every entry is exercised
    for key in params.keys():
        if key[1] in ("bias", "bn_beta"):
            params[key] = 0.1 * rng.standard_normal(params[key].shape)
        if key[1] == "bn_gamma":
            params[key] = 1.0 + 0.1 * rng.standard_normal(params[key].shape)
        if key[1] == "bn_running_mean":
            params[key] = 0.1 * rng.standard_normal(params[key].shape)
        if key[1] == "bn_running_var":
            params[key] = 1.0 + 0.5 * rng.uniform(size=params[key].shape)
    return spec, params


def batch(seed=0, n=6, d=4, k=3):
    rng = np.random.default_rng(seed + 200)
    return rng.uniform(size=(n, d)), rng.integers(0, k, size=n)


def flat_params(pairs):
    """ParamVector from ``[(layer_id, role, array)]``."""
    return ParamVector({(lid, role): np.asarray(a, dtype=np.float64) for lid, role, a in pairs})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled by test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
