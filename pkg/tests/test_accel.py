import numpy as np
import pytest

from ipslab import _accel


rng = np.random.default_rng(17)
PTS = rng.uniform(1.0, 2.0, size=(400, 3))
WTS = rng.uniform(0.1, 1.0, size=400)
X = np.array([0.3, 0.4, 0.5])
Y = np.array([0.6, 0.35, 0.55])
NU = np.array([0.0, 0.0, 1.0])


def test_paths_agree_hess_dot():
    a = _accel._hess_dot_sum_np(PTS, WTS, X, Y)
    b = _accel.hess_dot_sum(PTS, WTS, X, Y)
    assert b == pytest.approx(a, rel=1e-12)


def test_paths_agree_grad_dot():
    a = _accel._grad_dot_sum_np(PTS, WTS, X, Y)
    b = _accel.grad_dot_sum(PTS, WTS, X, Y)
    assert b == pytest.approx(a, rel=1e-12)


def test_paths_agree_flux():
    a = _accel._grad_hess_flux_sum_np(PTS, WTS, X, Y, NU)
    b = _accel.grad_hess_flux_sum(PTS, WTS, X, Y, NU)
    assert b == pytest.approx(a, rel=1e-12)


def test_paths_agree_source_matrices():
    t = PTS[:50]
    s = PTS[200:230] + 5.0
    assert np.allclose(_accel.source_matrix(t, s), _accel._source_matrix_np(t, s), rtol=1e-13)
    assert np.allclose(
        _accel.source_grad_matrix(t, s), _accel._source_grad_matrix_np(t, s), rtol=1e-13
    )


def test_hess_dot_diagonal_closed_form():
    # hessG : hessG at one displacement equals 3/(8 pi^2 r^6)
    p = np.array([[1.3, -0.2, 0.4]])
    w = np.array([1.0])
    x = np.zeros(3)
    r = np.linalg.norm(p[0])
    assert _accel.hess_dot_sum(p, w, x, x) == pytest.approx(
        3.0 / (8 * np.pi**2 * r**6), rel=1e-12
    )


def test_grad_dot_closed_form():
    p = np.array([[0.7, 0.1, -0.3]])
    w = np.array([2.0])
    u = p[0] - X
    v = p[0] - Y
    expect = 2.0 * (u @ v) / (16 * np.pi**2 * np.linalg.norm(u) ** 3 * np.linalg.norm(v) ** 3)
    assert _accel.grad_dot_sum(p, w, X, Y) == pytest.approx(expect, rel=1e-12)


def test_flux_matches_dense_algebra():
    # compare against an explicit hessian-matrix evaluation
    from ipslab.kernels import eval_gradG, eval_hessG

    p = PTS[:20]
    w = WTS[:20]
    expect = 0.0
    for i in range(20):
        gu = eval_gradG(p[i] - X)
        Hv = eval_hessG(p[i] - Y)
        expect += w[i] * gu @ (Hv @ NU)
    assert _accel.grad_hess_flux_sum(p, w, X, Y, NU) == pytest.approx(expect, rel=1e-11)


def test_jit_flag_reflects_environment():
    import os

    want = os.environ.get("IPSLAB_JIT", "1") != "0"
    if not want:
        assert not _accel.HAVE_JIT
    else:
        # in the pinned environment numba is importable
        assert _accel.HAVE_JIT
