import os
import subprocess
import sys

import numpy as np
import pytest

from wclab import backend

BACKENDS = ["python"] + (["ext"] if backend.have_extension() else [])


@pytest.fixture(params=BACKENDS)
def kernels(request):
    return backend.get_backend(request.param)


def test_extension_is_preferred_when_built():
    if backend.have_extension() and not os.environ.get("WCLAB_PURE_PYTHON"):
        assert backend.BACKEND == "ext"


def test_env_var_forces_python_fallback():
    out = subprocess.run(
        [sys.executable, "-c", "import wclab.backend as b; print(b.BACKEND)"],
        env={**os.environ, "WCLAB_PURE_PYTHON": "1"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_unknown_backend_name():
    with pytest.raises(ValueError):
        backend.get_backend("fortran")


class TestKernels:
    def test_add_scaled(self, kernels, rng):
        x = rng.normal(size=(5, 7))
        y = rng.normal(size=(5, 7))
        assert np.allclose(kernels.add_scaled(x, y, 2.5), x + 2.5 * y, rtol=0, atol=1e-15)

    def test_scale_columns(self, kernels, rng):
        w = rng.normal(size=(6, 4))
        d = rng.normal(size=4)
        assert np.allclose(kernels.scale_columns(w, d), w * d, rtol=0, atol=1e-15)

    def test_column_sq_norms(self, kernels, rng):
        w = rng.normal(size=(8, 3))
        assert np.allclose(kernels.column_sq_norms(w), (w * w).sum(axis=0), rtol=1e-14)

    def test_skew_lowrank(self, kernels, rng):
        dp = rng.normal(size=(6, 2))
        cp = rng.normal(size=(6, 2))
        s = kernels.skew_lowrank(dp, cp)
        assert np.allclose(s, dp @ cp.T - cp @ dp.T, rtol=0, atol=1e-14)
        assert np.array_equal(s.T, -s)  # antisymmetry is exact, not approximate

    @pytest.mark.parametrize("rp", [1, 3])
    def test_rotation_combine(self, kernels, rng, rp):
        w = rng.normal(size=(5, 6))
        dp = rng.normal(size=(6, rp))
        cp = rng.normal(size=(6, rp))
        u = w @ dp
        v = w @ cp
        expected = w + 0.02 * (u @ cp.T - v @ dp.T)
        out = kernels.rotation_combine(w, u, v, dp, cp, 0.02)
        assert np.allclose(out, expected, rtol=0, atol=1e-14)

    def test_prediag_combine(self, kernels, rng):
        w = rng.normal(size=(4, 5))
        ba = rng.normal(size=(4, 5))
        d = rng.normal(size=5)
        out = kernels.prediag_combine(w, ba, d, 1.5)
        assert np.allclose(out, w * d + 1.5 * ba, rtol=0, atol=1e-15)


@pytest.mark.skipif(not backend.have_extension(), reason="extension not built")
class TestBackendsAgree:
    def test_all_kernels_match(self, rng):
        ext = backend.get_backend("ext")
        py = backend.get_backend("python")
        w = rng.normal(size=(20, 17))
        ba = rng.normal(size=(20, 17))
        d = rng.normal(size=17)
        dp = rng.normal(size=(17, 2))
        cp = rng.normal(size=(17, 2))
        u = w @ dp
        v = w @ cp
        checks = [
            (ext.add_scaled(w, ba, 2.0), py.add_scaled(w, ba, 2.0)),
            (ext.scale_columns(w, d), py.scale_columns(w, d)),
            (ext.column_sq_norms(w), py.column_sq_norms(w)),
            (ext.skew_lowrank(dp, cp), py.skew_lowrank(dp, cp)),
            (ext.rotation_combine(w, u, v, dp, cp, 0.01),
             py.rotation_combine(w, u, v, dp, cp, 0.01)),
            (ext.prediag_combine(w, ba, d, 2.0), py.prediag_combine(w, ba, d, 2.0)),
        ]
        for got_ext, got_py in checks:
            assert np.allclose(got_ext, got_py, rtol=1e-13, atol=1e-13)

    def test_ext_shape_errors(self, rng):
        ext = backend.get_backend("ext")
        with pytest.raises(ValueError):
            ext.add_scaled(rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), 1.0)
        with pytest.raises(ValueError):
            ext.scale_columns(rng.normal(size=(2, 3)), np.ones(2))
