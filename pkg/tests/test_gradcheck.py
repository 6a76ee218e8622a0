import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drk import gradcheck as G
from drk.errors import NumericError, ShapeError


def test_fd_linear_and_quadratic():
    x = np.random.default_rng(0).standard_normal(7)
    np.testing.assert_allclose(G.fd_gradient(np.sum, x), np.ones(7), atol=1e-10)
    assert abs(G.fd_gradient(lambda v: float(np.sum(v**2)), np.array([3.0]))[0] - 6) <= 1e-8


def test_fd_leaves_input_untouched():
    x = np.arange(4.0)
    G.fd_gradient(np.sum, x)
    assert np.array_equal(x, np.arange(4.0))


def test_fd_non_finite_reports_index():
    with pytest.raises(NumericError) as info:
        with np.errstate(invalid="ignore"):
            G.fd_gradient(lambda v: float(np.log(v).sum()), np.array([1.0, 5e-6]))
    assert info.value.index == 1


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        G.fd_gradient(np.sum, np.ones(2), h=0)


def test_check_examples():
    r = G.check(np.ones(3), np.ones(3), 1e-6)
    assert r.passed and r.max_rel_err == 0
    assert G.check(np.array([1.0]), np.array([1.0001]), 1e-3).passed
    r = G.check(np.array([1.0]), np.array([1.01]), 1e-3, abs_tol=1e-6)
    assert not r.passed and r.worst_index == 0


def test_check_abs_floor_excuses_tiny_elements():
    r = G.check(np.array([1e-12, 1.0]), np.array([3e-12, 1.0]), 1e-6)
    assert r.passed and r.max_rel_err == 0
    with pytest.raises(ShapeError):
        G.check(np.ones(2), np.ones(3), 1e-6)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(1e-9, 1e-1))
def test_check_pass_iff_max_rel_within_tol(values, tol):
    a = np.array(values)
    n = a * (1 + 1e-4) + 1e-7
    r = G.check(a, n, tol)
    assert r.passed == (r.max_rel_err <= tol)


def test_merge():
    a = G.GradReport(1e-7, 1e-9, 3, 10, True)
    b = G.GradReport(1e-5, 1e-8, 1, 5, False)
    m = a.merge(b)
    assert (m.max_rel_err, m.worst_index, m.n_checked, m.passed) == (1e-5, 1, 15, False)


def test_format_report():
    line = G.format_report("raf", G.GradReport(2.5e-9, 0.0, 0, 1, True))
    assert line == "module=raf max_rel_err=2.500e-09 pass=true"


def test_run_suite_unknown():
    with pytest.raises(ValueError):
        G.run_suite("nope", 0)


def test_suites_cover_every_module():
    expected = {"conv2d", "bilinear", "deform", "se", "residual", "enhance", "dynconv",
                "bce", "focal", "dice", "raf"}
    assert set(G.SUITES) == expected


def test_broken_gradient_is_caught():
    def f(x):
        return float(np.sum(x**3))

    x = np.linspace(0.5, 1.5, 5)
    assert not G.check(2 * x**2, G.fd_gradient(f, x), G.TOL_SMOOTH).passed
    assert G.check(3 * x**2, G.fd_gradient(f, x), G.TOL_SMOOTH).passed
