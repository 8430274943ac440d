import os
import subprocess
import sys

import numpy as np
import pytest

from wima import _backend
from wima.model import ModelSpec, init_params

pytestmark = pytest.mark.skipif("cython" not in _backend.available(), reason="extension not built")

SPECS = [ModelSpec("logistic", 5, 4), ModelSpec("mlp1", 5, 4, 7, "relu"), ModelSpec("mlp1", 5, 4, 7, "tanh")]


def problem(spec, seed, n=23):
    rng = np.random.default_rng(seed)
    return init_params(spec, seed).values, rng.normal(size=(n, 5)), rng.integers(0, 4, n)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
@pytest.mark.parametrize("seed", range(5))
def test_loss_grad_agree(spec, seed):
    p, X, y = problem(spec, seed)
    args = spec.kernel_args
    kind, d, h, c, act = args
    lp, gp = _backend.available()["python"].loss_grad(kind, p, X, y, d, h, c, act)
    lc, gc = _backend.available()["cython"].loss_grad(kind, p, X, y, d, h, c, act)
    assert abs(lp - lc) <= 1e-13 * max(1.0, abs(lp))
    np.testing.assert_allclose(gc, gp, rtol=1e-11, atol=1e-14)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
@pytest.mark.parametrize("opts", [dict(), dict(momentum=0.9, weight_decay=1e-3),
                                  dict(mu=0.5), dict(correction=True)])
def test_local_sgd_agree(spec, opts):
    p, X, y = problem(spec, 1, n=40)
    rng = np.random.default_rng(7)
    order = np.stack([rng.permutation(40) for _ in range(3)]).astype(np.int64)
    corr = rng.normal(scale=0.01, size=p.size) if opts.get("correction") else None
    kind, d, h, c, act = spec.kernel_args
    out = {}
    for name, mod in _backend.available().items():
        out[name] = mod.local_sgd(kind, p, X, y, order, 6, 0.1, opts.get("momentum", 0.0),
                                  opts.get("weight_decay", 0.0), opts.get("mu", 0.0), p, corr,
                                  d, h, c, act)
    (wp, lp, sp, bp), (wc, lc, sc, bc) = out["python"], out["cython"]
    assert sp == sc == 21 and bp == bc == -1
    np.testing.assert_allclose(wc, wp, rtol=0, atol=1e-12)
    assert abs(lp - lc) <= 1e-11


def test_local_sgd_divergence_agree():
    spec = SPECS[0]
    p, X, y = problem(spec, 0)
    p = np.full_like(p, 1e300)
    order = np.arange(23, dtype=np.int64)[None, :]
    kind, d, h, c, act = spec.kernel_args
    bad = [mod.local_sgd(kind, p, X, y, order, 5, 1e10, 0.0, 1.0, 0.0, p, None, d, h, c, act)[3]
           for mod in _backend.available().values()]
    assert bad == [0, 0]


def test_environment_forces_fallback():
    env = dict(os.environ, WIMA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from wima import _backend; print(_backend.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_use_restores_previous():
    before = _backend.BACKEND
    with _backend.use("python"):
        assert _backend.kernels.NAME == "python"
    assert _backend.BACKEND == before
    with pytest.raises(ValueError):
        _backend.set_backend("fortran")
