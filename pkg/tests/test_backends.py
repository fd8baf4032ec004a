import os
import subprocess
import sys

import numpy as np
import pytest

from cora import kernels_numpy as knp

from oracles import naive_unfold

try:
    from cora import kernels_numba as knb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

GEOMETRIES = [
    # (k1, k2, s1, s2, p1, p2, h, w)
    (3, 3, 1, 1, 0, 0, 8, 8),
    (3, 3, 1, 1, 1, 1, 8, 8),
    (2, 3, 2, 1, 1, 0, 9, 7),
    (1, 1, 1, 1, 0, 0, 5, 5),
    (4, 2, 2, 2, 2, 1, 10, 6),
]


class TestNumpyKernels:
    @pytest.mark.parametrize("k1,k2,s1,s2,p1,p2,h,w", GEOMETRIES)
    def test_im2col_matches_naive(self, rng, k1, k2, s1, s2, p1, p2, h, w):
        x = rng.normal(size=(2, 3, h, w))
        got = knp.im2col(x, k1, k2, s1, s2, p1, p2)
        for b in range(2):
            ref = naive_unfold(x[b], (k1, k2), (s1, s2), (p1, p2))
            assert np.allclose(got[b], ref.reshape(ref.shape[0], -1))

    @pytest.mark.parametrize("k1,k2,s1,s2,p1,p2,h,w", GEOMETRIES)
    def test_col2im_is_adjoint(self, rng, k1, k2, s1, s2, p1, p2, h, w):
        # <col2im(y), x> == <y, im2col(x)> for random x, y
        x = rng.normal(size=(2, 3, h, w))
        cols = knp.im2col(x, k1, k2, s1, s2, p1, p2)
        y = rng.normal(size=cols.shape)
        back = knp.col2im(y, 3, h, w, k1, k2, s1, s2, p1, p2)
        assert np.sum(back * x) == pytest.approx(np.sum(y * cols), rel=1e-12)

    def test_maxpool_first_max_wins(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0] = [[5.0, 5.0], [5.0, 5.0]]
        out, arg = knp.maxpool_forward(x, 2, 2)
        assert out[0, 0, 0, 0] == 5.0
        assert arg[0, 0, 0, 0] == 0

    def test_maxpool_backward_routes_to_argmax(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        out, arg = knp.maxpool_forward(x, 2, 2)
        dout = np.ones_like(out)
        dx = knp.maxpool_backward(dout, arg, 4, 4, 2, 2)
        assert dx.sum() == pytest.approx(dout.size)
        assert np.all((dx == 0) | (dx == 1))

    def test_avgpool_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        out = knp.avgpool_forward(x, 2, 2)
        y = rng.normal(size=out.shape)
        dx = knp.avgpool_backward(y, 6, 6, 2, 2)
        assert np.sum(dx * x) == pytest.approx(np.sum(y * out), rel=1e-12)


@needs_numba
class TestBackendAgreement:
    @pytest.mark.parametrize("k1,k2,s1,s2,p1,p2,h,w", GEOMETRIES)
    def test_im2col(self, rng, k1, k2, s1, s2, p1, p2, h, w):
        x = rng.normal(size=(2, 3, h, w))
        a = knp.im2col(x, k1, k2, s1, s2, p1, p2)
        b = knb.im2col(x, k1, k2, s1, s2, p1, p2)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("k1,k2,s1,s2,p1,p2,h,w", GEOMETRIES)
    def test_col2im(self, rng, k1, k2, s1, s2, p1, p2, h, w):
        x = rng.normal(size=(2, 3, h, w))
        cols = knp.im2col(x, k1, k2, s1, s2, p1, p2)
        y = rng.normal(size=cols.shape)
        a = knp.col2im(y, 3, h, w, k1, k2, s1, s2, p1, p2)
        b = knb.col2im(y, 3, h, w, k1, k2, s1, s2, p1, p2)
        assert np.allclose(a, b, atol=1e-12)

    def test_maxpool(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        oa, aa = knp.maxpool_forward(x, 2, 2)
        ob, ab = knb.maxpool_forward(x, 2, 2)
        assert np.array_equal(oa, ob)
        assert np.array_equal(aa, ab)
        dout = rng.normal(size=oa.shape)
        da = knp.maxpool_backward(dout, aa, 8, 8, 2, 2)
        db = knb.maxpool_backward(dout, ab, 8, 8, 2, 2)
        assert np.array_equal(da, db)

    def test_avgpool(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        a = knp.avgpool_forward(x, 2, 2)
        b = knb.avgpool_forward(x, 2, 2)
        assert np.allclose(a, b, atol=1e-14)
        dout = rng.normal(size=a.shape)
        da = knp.avgpool_backward(dout, 8, 8, 2, 2)
        db = knb.avgpool_backward(dout, 8, 8, 2, 2)
        assert np.allclose(da, db, atol=1e-14)

    def test_maxpool_tie_break_agrees(self):
        x = np.zeros((1, 1, 4, 4))
        _, aa = knp.maxpool_forward(x, 2, 2)
        _, ab = knb.maxpool_forward(x, 2, 2)
        assert np.array_equal(aa, ab)


class TestEnvSelection:
    def _backend_of(self, env_value):
        env = dict(os.environ)
        if env_value is None:
            env.pop("CORA_BACKEND", None)
        else:
            env["CORA_BACKEND"] = env_value
        out = subprocess.run(
            [sys.executable, "-c", "import cora; print(cora.BACKEND)"],
            capture_output=True, text=True, env=env, check=True)
        return out.stdout.strip()

    def test_numpy_forced(self):
        assert self._backend_of("numpy") == "numpy"

    @needs_numba
    def test_numba_default(self):
        assert self._backend_of(None) == "numba"
        assert self._backend_of("numba") == "numba"
