import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bwlinear.bwloss import (
    Target,
    bw_squared,
    bw_variational,
    gap_bound,
    grad_cov,
    loss,
    loss_fn,
    loss_fn_tau,
    mdm_margin,
    sqrt_space_loss,
    trace_floor,
)
from bwlinear.errors import RankError, SingularityError
from bwlinear.matcore import PsdMatrix, sqrtm_psd

from conftest import fd_gradient, random_pd

WITNESS = (np.sqrt(2.0) - 1.0) ** 2  # 0.171573


def test_bw_zero_on_diagonal(rng):
    s = random_pd(4, rng)
    assert bw_squared(s, Target(s)) == pytest.approx(0.0, abs=1e-12)


def test_bw_identity_vs_diag():
    assert bw_squared(np.eye(2), Target(np.diag([1.0, 2.0]))) == pytest.approx(WITNESS, abs=1e-14)
    assert WITNESS == pytest.approx(0.171573, abs=1e-6)


def test_bw_commuting_reduces_to_hellinger():
    assert bw_squared(np.diag([4.0]), Target(np.diag([1.0]))) == pytest.approx(1.0, abs=1e-14)


def test_bw_factor_path_matches_dense(rng):
    f = rng.standard_normal((4, 2))
    t = Target(random_pd(4, rng))
    assert bw_squared(PsdMatrix.from_factor(f), t) == pytest.approx(bw_squared(f @ f.T, t), abs=1e-10)


def test_bw_variational_examples(rng):
    s0 = random_pd(3, rng)
    value, u = bw_variational(s0, Target(s0))
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(u, np.eye(3), atol=1e-8)
    value, _ = bw_variational(np.eye(2), Target(np.diag([1.0, 2.0])))
    assert value == pytest.approx(WITNESS, abs=1e-12)


def test_bw_variational_agrees():
    rng = np.random.default_rng(7)
    for _ in range(50):
        s, s0 = random_pd(5, rng), random_pd(5, rng)
        t = Target(s0)
        assert bw_variational(s, t)[0] == pytest.approx(bw_squared(s, t), abs=1e-9)


def test_sqrt_space_loss_is_bw(rng):
    x, y = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    assert sqrt_space_loss(x, y) == pytest.approx(bw_squared(x @ x.T, Target(y @ y.T)), abs=1e-10)


def test_loss_fn_at_minimizer(rng):
    s0 = random_pd(3, rng)
    ev = loss_fn(sqrtm_psd(s0), Target(s0))
    assert ev.value == pytest.approx(0.0, abs=1e-12)
    assert np.abs(ev.gradient).max() <= 1e-10


def test_loss_fn_gradient_fd(rng):
    t = Target(random_pd(4, rng))
    w = rng.standard_normal((4, 4))
    g = loss_fn(w, t).gradient
    num = fd_gradient(lambda x: loss_fn(x, t).value, w)
    assert np.linalg.norm(g - num) / np.linalg.norm(g) <= 1e-6


def test_loss_fn_rank_deficient_value():
    t = Target(np.diag([3.0, 2.0, 1.0]))
    w = np.zeros((3, 3))
    w[0, 0] = np.sqrt(3.0)
    ev = loss_fn(w, t)
    assert ev.value == pytest.approx(3.0, abs=1e-12)
    assert ev.gradient is None
    with pytest.raises(SingularityError):
        loss_fn(w, t, require_grad=True)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_gradient_norm_identity(n, seed):
    rng = np.random.default_rng(seed)
    t = Target(random_pd(n, rng))
    w = rng.standard_normal((n, n))
    ev = loss_fn(w, t)
    assert np.sum(ev.gradient**2) / (4 * ev.value) == pytest.approx(1.0, abs=1e-8)


def test_loss_tau_at_zero():
    lam = np.array([3.0, 2.0, 1.0])
    t = Target(np.diag(lam), tau=0.3)
    expected = np.sum((np.sqrt(lam) - np.sqrt(0.3)) ** 2)
    assert loss_fn_tau(np.zeros((3, 2)), t).value == pytest.approx(expected, abs=1e-12)


def test_loss_tau_gradient_fd(rng):
    t = Target(random_pd(4, rng), tau=0.1)
    w = rng.standard_normal((4, 4))
    g = loss_fn_tau(w, t).gradient
    num = fd_gradient(lambda x: loss_fn_tau(x, t).value, w)
    assert np.linalg.norm(g - num) / np.linalg.norm(g) <= 1e-6


def test_loss_tau_small_limit(rng):
    s0 = random_pd(3, rng)
    w = rng.standard_normal((3, 3))
    a = loss_fn_tau(w, Target(s0, tau=1e-10)).value
    assert a == pytest.approx(loss_fn(w, Target(s0)).value, abs=1e-6)


def test_loss_dispatch(rng):
    s0 = random_pd(3, rng)
    w = rng.standard_normal((3, 3))
    assert loss(w, Target(s0, tau=0.2)).value == loss_fn_tau(w, Target(s0, tau=0.2)).value
    assert loss(w, Target(s0)).value == loss_fn(w, Target(s0)).value


def test_grad_cov_zero_at_target(rng):
    s0 = random_pd(3, rng)
    assert np.abs(grad_cov(s0, Target(s0))).max() <= 1e-12


def test_grad_cov_chain_rule(rng):
    t = Target(random_pd(4, rng), tau=0.2)
    w = rng.standard_normal((4, 3))
    lhs = 2 * grad_cov(w @ w.T + 0.2 * np.eye(4), t) @ w
    assert np.abs(lhs - loss_fn_tau(w, t).gradient).max() <= 1e-10


def test_grad_cov_fd(rng):
    t = Target(random_pd(3, rng))
    s = random_pd(3, rng)
    g = grad_cov(s, t)
    # differentiate along symmetric directions only
    num = fd_gradient(lambda x: bw_squared(0.5 * (x + x.T), t), s)
    assert np.linalg.norm(g - num) / np.linalg.norm(g) <= 1e-6


def test_gap_bound_examples():
    t = Target(np.eye(2))
    assert gap_bound(t, 0.0) == 0.0
    assert gap_bound(t, 0.01, 2) == pytest.approx(0.42, abs=1e-14)
    with pytest.raises(RankError):
        gap_bound(Target(np.diag([1.0, 0.0])), 0.1)


def test_gap_bound_holds():
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(2, 6))
        s0 = random_pd(n, rng, floor=0.2)
        tau = 10 ** rng.uniform(-6, 0)
        w = rng.standard_normal((n, n))
        gap = abs(loss_fn_tau(w, Target(s0, tau=tau)).value - loss_fn(w, Target(s0)).value)
        assert gap <= gap_bound(Target(s0), tau)


def test_mdm_margin_examples(rng):
    s0 = random_pd(3, rng)
    t = Target(s0)
    assert mdm_margin(sqrtm_psd(s0), t) == pytest.approx(t.sigma_min_sqrt, abs=1e-10)
    assert mdm_margin(np.zeros((2, 2)), Target(np.eye(2))) == pytest.approx(1 - np.sqrt(2), abs=1e-14)


def test_trace_floor_examples():
    t = Target(np.eye(2))
    assert trace_floor(np.eye(2), t)
    assert bw_squared(9 * np.eye(2), t) == pytest.approx(8.0, abs=1e-12)
    assert trace_floor(9 * np.eye(2), t)
    rng = np.random.default_rng(5)
    for _ in range(100):
        assert trace_floor(random_pd(3, rng, floor=0.0) * rng.uniform(0, 10), Target(random_pd(3, rng)))


def test_target_properties():
    t = Target.from_spectrum([1.0, 4.0], np.eye(2), tau=0.1)
    np.testing.assert_allclose(t.eigvals, [4.0, 1.0])
    assert t.sigma_min_sqrt == pytest.approx(1.0)
    assert t.trace == pytest.approx(5.0)
    assert t.distinct and t.full_rank
    assert not Target(np.eye(2)).distinct
