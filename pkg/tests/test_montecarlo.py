import math

import numpy as np
import pytest

from swingbspde.montecarlo import (
    EPS_SWITCH,
    PolicyTable,
    dual_bound,
    dual_path_values,
    extract_policy,
    path_uniforms,
    price,
    primal_path_values,
    rule_agreement,
    sample_paths,
    simulate_primal,
)

from conftest import deterministic, exponential, gbm, solved

ANCHOR = 1 - math.exp(-1)


def test_philox_stream_is_pinned():
    # numpy Philox4x64-10, key (seed, path), first draws from counter 0
    U = path_uniforms(2, 3, 42)
    assert np.allclose(U, [[0.82019815, 0.18924562, 0.86766081],
                           [0.44374692, 0.81639210, 0.50902619]], atol=1e-8)


def test_path_substreams_are_independent_of_batch():
    m = gbm(30)
    big = sample_paths(m, 200, seed=5)
    small = sample_paths(m, 10, seed=5)
    assert np.array_equal(big[:10], small)
    assert np.array_equal(sample_paths(m, 200, seed=5), big)
    assert not np.array_equal(sample_paths(m, 200, seed=6), big)


def test_sampled_paths_follow_transitions():
    m = exponential(50)
    paths = sample_paths(m, 20000, seed=1)
    # dead is absorbing
    dead = paths == 1
    assert np.all(np.diff(dead.astype(int), axis=1) >= 0)
    surv = (paths[:, -1] == 0).mean()
    assert surv == pytest.approx(math.exp(-1), abs=4 * math.sqrt(surv * (1 - surv) / 20000))


@pytest.mark.parametrize("rule", ["dp-argmax", "marginal-rule"])
@pytest.mark.parametrize("model", [deterministic(60), exponential(60)])
def test_indicator_policies_exercise_asap(rule, model):
    vg, J, D = solved(model, 1.0)
    pol = extract_policy(J, D, model, rule)
    for i in range(model.N):
        alive = model.X[i] > 0
        assert np.all(pol.exercise[i][alive, 1:])
        assert not np.any(pol.exercise[i][:, 0])


def test_marginal_rule_zero_payoff_is_all_exercise():
    m = gbm(20, S0=1.0, K=1000.0)
    vg, J, D = solved(m, 2.0)
    pol = extract_policy(J, D, m, "marginal-rule")
    for e in pol.exercise:
        assert np.all(e[:, 1:]) and not np.any(e[:, 0])


@pytest.mark.parametrize("N", [50, 100])
def test_rules_disagree_only_in_dead_band(N):
    m = gbm(N)
    vg, J, D = solved(m, 2.0)
    a = extract_policy(J, D, m, "dp-argmax")
    b = extract_policy(J, D, m, "marginal-rule")
    for i in range(m.N):
        diff = a.exercise[i] != b.exercise[i]
        margin = np.abs(m.X[i][:, None] + D.D[i])
        assert np.all(margin[diff] <= EPS_SWITCH)
    # indifference cells are common with a one-sided stencil; see README
    assert rule_agreement(a, b) >= 0.95


def test_unknown_rule_rejected():
    m = gbm(5)
    vg, J, D = solved(m, 2.0)
    with pytest.raises(ValueError):
        extract_policy(J, D, m, "greedy")


def test_primal_zero_payoff():
    m = gbm(20, S0=1.0, K=1000.0)
    vg, J, D = solved(m, 2.0)
    est = simulate_primal(m, extract_policy(J), vg, 0.0, 500, seed=3)
    assert est.mean == 0.0 and est.stderr == 0.0


def test_primal_exponential_anchor():
    m = exponential(200)
    vg, J, D = solved(m, 1.0)
    est = simulate_primal(m, extract_policy(J), vg, 0.0, 100_000, seed=7)
    assert abs(est.mean - ANCHOR) <= 3 * est.stderr


def test_primal_gbm_matches_dp_value():
    m = gbm(50)
    vg, J, D = solved(m, 2.0)
    est = simulate_primal(m, extract_policy(J), vg, 0.5, 20_000, seed=11)
    assert abs(est.mean - J.value(0, 0, 0.5)) <= 3 * est.stderr


def test_primal_needs_two_paths():
    m = gbm(5)
    vg, J, D = solved(m, 2.0)
    with pytest.raises(ValueError):
        simulate_primal(m, extract_policy(J), vg, 0.0, 1, seed=0)


def test_primal_aborts_on_overdraft():
    m = gbm(10)
    vg, J, D = solved(m, 2.0)
    flags = [np.ones_like(e) for e in J.exercise]
    bad = PolicyTable(tuple(flags), 2.0, "corrupt")
    with pytest.raises(RuntimeError, match="overdraft"):
        primal_path_values(m, bad, vg, 0.5, sample_paths(m, 50, 0))


def test_primal_volume_stays_feasible():
    m = gbm(40)
    vg, J, D = solved(m, 2.0)
    paths = sample_paths(m, 2000, 2)
    v = primal_path_values(m, extract_policy(J), vg, 0.6, paths)
    j0 = vg.level_index(0.6)
    # each path earns at most j0 cells of the best payoff it sees
    cap = np.array([np.sort([m.X[i][n] for i, n in enumerate(p[:-1])])[-j0:].sum() for p in paths]) * vg.dy
    assert np.all(v <= cap + 1e-9)


def test_dual_optimal_deterministic_is_exact():
    m = deterministic(100, tstar=0.5)
    vg, J, D = solved(m, 2.0)
    v = dual_path_values(J, 0.0, sample_paths(m, 10, 0))
    assert np.all(np.abs(v - J.value(0, 0, 0.0)) <= vg.L * m.dt)


@pytest.mark.parametrize("y0", [0.0, 0.3])
def test_dual_zero_map_exponential_matches_closed_form(y0):
    m = exponential(100)
    vg, J, D = solved(m, 1.0)
    paths = sample_paths(m, 20_000, 3)
    dual = dual_bound(J, y0, 20_000, 3, "zero", paths=paths)
    primal = simulate_primal(m, extract_policy(J), vg, y0, 20_000, 3, paths=paths)
    # exercising as soon as possible needs no foresight, so the bound is tight pathwise
    assert dual.mean == pytest.approx(primal.mean, abs=1e-12)
    assert abs(dual.mean - J.value(0, 0, y0)) <= 3 * dual.stderr


@pytest.mark.parametrize("kind", ["optimal", "zero"])
def test_weak_duality_gbm(kind):
    m = gbm(50)
    vg, J, D = solved(m, 2.0)
    rep = price(m, vg, 0.5, 5000, 13, kind)
    assert rep.gap >= -3 * rep.combined_stderr


def test_optimal_map_pathwise_bound():
    m = gbm(50)
    vg, J, D = solved(m, 2.0)
    for y0 in (0.0, 0.5, 0.9):
        v = dual_path_values(J, y0, sample_paths(m, 3000, 4), "optimal")
        assert np.all(v <= J.value(0, 0, y0) + 1e-9)
        assert abs(v.mean() - J.value(0, 0, y0)) <= vg.L * m.dt


def test_zero_map_is_looser_than_optimal_map():
    m = gbm(30)
    vg, J, D = solved(m, 2.0)
    paths = sample_paths(m, 4000, 9)
    zero = dual_bound(J, 0.4, 4000, 9, "zero", paths=paths)
    opt = dual_bound(J, 0.4, 4000, 9, "optimal", paths=paths)
    # the perfect-foresight bound is the loosest; the optimal map is tight
    assert zero.mean >= opt.mean - 3 * zero.stderr
    assert zero.stderr > opt.stderr


def test_unknown_map_rejected():
    m = gbm(5)
    vg, J, D = solved(m, 2.0)
    with pytest.raises(ValueError):
        dual_bound(J, 0.0, 10, 0, "regression")


def test_price_exponential_anchor():
    m = exponential(200)
    vg, J, D = solved(m, 1.0)
    rep = price(m, vg, 0.0, 50_000, 7)
    assert abs(rep.primal.mean - ANCHOR) <= 3 * rep.primal.stderr
    assert rep.gap <= 0.02
    assert rep.to_dict()["residuals"]["bspde_max"] <= 1e-10


def test_price_full_volume_is_zero():
    m = gbm(20)
    vg, J, D = solved(m, 2.0)
    rep = price(m, vg, 1.0, 100, 0)
    assert rep.primal.mean == rep.dual.mean == 0.0


def test_price_zero_payoff_is_zero():
    m = gbm(20, S0=1.0, K=1000.0)
    vg, J, D = solved(m, 2.0)
    d = price(m, vg, 0.0, 100, 0, "zero").to_dict()
    assert d["primal"] == {"mean": 0.0, "stderr": 0.0}
    assert d["dual"] == {"mean": 0.0, "stderr": 0.0, "map": "zero"} and d["gap"] == 0.0


def test_price_reproducible():
    m = gbm(30)
    vg, J, D = solved(m, 2.0)
    assert price(m, vg, 0.4, 2000, 21).to_dict() == price(m, vg, 0.4, 2000, 21).to_dict()
