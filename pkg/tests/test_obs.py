import numpy as np
import pytest

from gradprune.obs import (
    MUTATION_HOOKS,
    ObsSolution,
    QuadModel,
    SingularHessianError,
    default_damping,
    hessian_from_acts,
    obs_delta_e_diag,
    obs_delta_e_first_order,
    obs_delta_e_full,
    obs_weight_update,
    sparsegpt_metric,
)


def random_model(rng, n, grad_scale=1.0, damping=0.0):
    a = rng.standard_normal((n + 3, n))
    hessian = a.T @ a + 0.1 * np.eye(n)
    return QuadModel(
        w=rng.standard_normal(n),
        g=grad_scale * rng.standard_normal(n),
        hessian=hessian,
        damping=damping,
    )


def test_hessian_from_acts_hand_example():
    h = hessian_from_acts([[1.0, 0.0], [0.0, 2.0]], damping=0.0, factor_two=True)
    np.testing.assert_array_equal(h, [[2.0, 0.0], [0.0, 8.0]])


def test_hessian_from_acts_rejects_empty():
    with pytest.raises(ValueError):
        hessian_from_acts(np.zeros((0, 3)))


def test_hessian_orthogonal_columns_give_diagonal():
    x = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [1.0, 0.0, 0.0]])
    h = hessian_from_acts(x, factor_two=True)
    np.testing.assert_allclose(h, np.diag(2.0 * (x * x).sum(axis=0)))


def test_classic_saliency_when_gradient_zero():
    n, m = 4, 2
    model = QuadModel(w=np.array([1.0, -1.0, 3.0, 0.5]), g=np.zeros(n), hessian=2.0 * np.eye(n))
    sol = obs_delta_e_full(model, m)
    assert sol.delta_e == pytest.approx(9.0, abs=1e-12)
    expected_dw = np.zeros(n)
    expected_dw[m] = -3.0
    np.testing.assert_allclose(sol.delta_w, expected_dw, atol=1e-12)


def test_constraint_satisfied_and_substitution_oracle():
    rng = np.random.default_rng(107)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        model = random_model(rng, n)
        m = int(rng.integers(0, n))
        sol = obs_delta_e_full(model, m)
        assert abs(model.w[m] + sol.delta_w[m]) < 1e-10
        assert sol.delta_e == pytest.approx(model.objective(sol.delta_w), abs=1e-10)


def test_closed_form_beats_sampled_feasible_points():
    rng = np.random.default_rng(109)
    for _ in range(20):
        model = random_model(rng, 6)
        m = int(rng.integers(0, 6))
        sol = obs_delta_e_full(model, m)
        for _ in range(100):
            v = rng.standard_normal(6) * rng.choice([1e-3, 1e-1, 1.0])
            v[m] = 0.0
            other = sol.delta_w + v
            assert model.objective(other) >= sol.delta_e - 1e-12


def test_first_order_equals_full_when_gradient_zero():
    rng = np.random.default_rng(113)
    model = random_model(rng, 5, grad_scale=0.0)
    for m in range(5):
        full = obs_delta_e_full(model, m).delta_e
        approx = obs_delta_e_first_order(model, m)
        assert approx == pytest.approx(full, abs=1e-12)
        classic = model.w[m] ** 2 / (2.0 * np.linalg.inv(model.hessian)[m, m])
        assert approx == pytest.approx(classic, abs=1e-12)


def test_first_order_matches_diag_shortcut_for_diagonal_curvature():
    rng = np.random.default_rng(127)
    x_norms = rng.uniform(0.5, 2.0, size=6)
    model = QuadModel(
        w=rng.standard_normal(6),
        g=0.01 * rng.standard_normal(6),
        hessian=2.0 * np.diag(x_norms**2),
    )
    for m in range(6):
        truncated = obs_delta_e_first_order(model, m)
        shortcut = obs_delta_e_diag(model.w[m], x_norms[m], model.g[m])
        assert truncated == pytest.approx(shortcut, abs=1e-12)


def test_truncation_error_shrinks_quadratically_in_gradient_scale():
    rng = np.random.default_rng(131)
    model0 = random_model(rng, 8)
    g0 = rng.standard_normal(8)
    m = 3
    scales = [1e-1, 1e-2, 1e-3, 1e-4]
    gaps = []
    for c in scales:
        model = QuadModel(w=model0.w, g=c * g0, hessian=model0.hessian)
        gaps.append(abs(obs_delta_e_full(model, m).delta_e - obs_delta_e_first_order(model, m)))
    slope = np.polyfit(np.log(scales), np.log(gaps), 1)[0]
    assert 1.8 <= slope <= 2.2


def test_diag_hand_arithmetic():
    assert obs_delta_e_diag(2.0, 3.0, 0.5) == 35.0
    assert obs_delta_e_diag(2.0, 3.0, 0.0) == 36.0


def test_sparsegpt_metric_identity_and_diagonal():
    rng = np.random.default_rng(137)
    w = rng.standard_normal((3, 4))
    np.testing.assert_allclose(sparsegpt_metric(w, np.eye(4)), w * w, atol=1e-14)
    d = np.array([1.0, 2.0, 4.0, 8.0])
    np.testing.assert_allclose(sparsegpt_metric(w, np.diag(d)), (w * w) * d[None, :], rtol=1e-12)


def test_sparsegpt_ranks_like_full_saliency_for_zero_gradient():
    rng = np.random.default_rng(139)
    for _ in range(10):
        d = rng.uniform(0.5, 4.0, size=5)
        hessian = np.diag(d)
        w = rng.standard_normal((6, 5))
        metric = sparsegpt_metric(w, hessian)
        for j in range(5):
            saliencies = []
            for i in range(6):
                model = QuadModel(w=w[:, j].copy(), g=np.zeros(6), hessian=np.diag(np.full(6, d[j])))
                saliencies.append(obs_delta_e_full(model, i).delta_e)
            # both orderings rank the column's entries identically
            assert (np.argsort(metric[:, j], kind="stable") == np.argsort(saliencies, kind="stable")).all()


def test_weight_update_identity_cases():
    rng = np.random.default_rng(149)
    w = rng.standard_normal(6)
    h = hessian_from_acts(rng.standard_normal((12, 6)))
    np.testing.assert_array_equal(obs_weight_update(w, np.zeros(6, dtype=bool), h), w)

    diag_h = np.diag(rng.uniform(1.0, 2.0, size=6))
    mask = np.array([True, False, False, True, False, False])
    updated = obs_weight_update(w, mask, diag_h)
    np.testing.assert_allclose(updated[~mask], w[~mask], rtol=1e-12)
    assert (updated[mask] == 0).all()


def test_weight_update_matches_lstsq_and_reduces_error():
    rng = np.random.default_rng(151)
    for _ in range(20):
        x = rng.standard_normal((20, 8))
        w = rng.standard_normal(8)
        mask = np.zeros(8, dtype=bool)
        mask[rng.permutation(8)[:4]] = True
        h = x.T @ x
        updated = obs_weight_update(w, mask, h)

        target = x @ w
        kept = ~mask
        coef, *_ = np.linalg.lstsq(x[:, kept], target, rcond=None)
        np.testing.assert_allclose(updated[kept], coef, atol=1e-9)

        err_updated = np.linalg.norm(x @ updated - target)
        err_plain = np.linalg.norm(x @ (w * kept) - target)
        assert err_updated <= err_plain


def test_weight_update_errors():
    h = np.eye(3)
    with pytest.raises(ValueError, match="kept"):
        obs_weight_update(np.ones(3), np.ones(3, dtype=bool), h)
    # rank-deficient kept submatrix
    x = np.zeros((4, 3))
    x[:, 0] = 1.0
    bad_h = x.T @ x
    with pytest.raises(SingularHessianError) as err:
        obs_weight_update(np.ones(3), np.array([True, False, False]), bad_h)
    assert err.value.condition > 1e13 or not np.isfinite(err.value.condition)


def test_singular_hessian_reports_condition():
    model = QuadModel(w=np.ones(3), g=np.zeros(3), hessian=np.zeros((3, 3)))
    with pytest.raises(SingularHessianError):
        obs_delta_e_full(model, 0)
    damped = QuadModel(w=np.ones(3), g=np.zeros(3), hessian=np.zeros((3, 3)),
                       damping=max(default_damping(np.eye(3)), 1e-6))
    assert obs_delta_e_full(damped, 0).delta_e > 0


def test_model_validation():
    with pytest.raises(ValueError, match="symmetric"):
        QuadModel(w=np.ones(2), g=np.zeros(2), hessian=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="dimension"):
        QuadModel(w=np.ones(513), g=np.zeros(513), hessian=np.eye(513))
    with pytest.raises(ValueError, match="out of range"):
        obs_delta_e_full(QuadModel(w=np.ones(2), g=np.zeros(2), hessian=np.eye(2)), 5)


def test_mutation_hook_breaks_substitution_oracle():
    rng = np.random.default_rng(157)
    model = random_model(rng, 6)
    sol = obs_delta_e_full(model, 2)
    assert sol.delta_e == pytest.approx(model.objective(sol.delta_w), abs=1e-10)
    MUTATION_HOOKS["third_term_scale"] = 1.01
    try:
        corrupted = obs_delta_e_full(model, 2)
        assert abs(corrupted.delta_e - model.objective(corrupted.delta_w)) > 1e-6
    finally:
        MUTATION_HOOKS["third_term_scale"] = 1.0
