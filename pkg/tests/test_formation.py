"""Tests for dyad tables, the formation logit, model ranking, simulation and GOF."""

import inspect
import math

import numpy as np
import pytest
from scipy import optimize, stats

from breaknet.errors import FitError, RankDeficiencyError, SeparationError, ValidationError
from breaknet.formation import (
    DyadObservation, FormationTermSpec, TERMS, build_dyad_table, change_stats,
    enumerate_formation_models, fit_formation, formation_gof, rank_p_value, simulate_formation,
    structural_stats,
)
from breaknet.ingest import IlvTable
from breaknet.netcore import DynamicNetwork, YearSnapshot, build_dynamic_network
from breaknet.simkit import random_ilvs, simulate_formation_panel


def ilv(ids, gender=None, popularity=None, followers=None, mean_distance=None):
    n = len(ids)
    return IlvTable(tuple(ids), {
        "gender": gender or [0] * n,
        "popularity": popularity or [0.0] * n,
        "followers": followers or [0.0] * n,
        "mean_distance": mean_distance or [0.0] * n,
    })


def obs(y, stats_row=None, t=2000, k=0):
    g = np.zeros(len(TERMS))
    g[0] = 1.0
    if stats_row:
        for name, v in stats_row.items():
            g[TERMS.index(name)] = v
    return DyadObservation((t, t + 1), (k, k + 1), y, g)


def logit_oracle(X, y):
    """Direct maximisation of the Bernoulli log-likelihood."""
    def nll(th):
        eta = X @ th
        return -np.sum(y * eta - np.logaddexp(0, eta))
    res = optimize.minimize(nll, np.zeros(X.shape[1]), method="BFGS", options={"gtol": 1e-10})
    return res.x, -res.fun


@pytest.fixture(scope="module")
def panel():
    rng = np.random.default_rng(21)
    ilvs = random_ilvs(range(80), rng, scale={"popularity": 20.0})
    theta = {"edges": -3.5, "match_gender_M": 0.8, "absdiff_popularity": -0.03}
    dyn = simulate_formation_panel(theta, ilvs, 6, rng, start_year=2000)
    return dyn, ilvs


class TestTermSpec:
    def test_edges_added(self):
        assert FormationTermSpec(("absdiff_popularity",)).terms == ("edges", "absdiff_popularity")

    def test_from_groups_canonical(self):
        spec = FormationTermSpec.from_groups(["followers", "gender"])
        assert spec.terms == ("edges", "match_gender_F", "match_gender_M", "absdiff_followers")
        assert spec.groups == ("gender", "followers")

    @pytest.mark.parametrize("terms", [("edges", "edges"), ("triangles",)])
    def test_invalid(self, terms):
        with pytest.raises(ValueError):
            FormationTermSpec(terms)


class TestChangeStats:
    def test_both_female(self):
        t = ilv([1, 2], gender=[-1, -1])
        g = dict(zip(TERMS, change_stats(1, 2, t)))
        assert g["match_gender_F"] == 1 and g["match_gender_M"] == 0 and g["edges"] == 1

    def test_unknown_gender_matches_nothing(self):
        t = ilv([1, 2], gender=[0, 0])
        g = dict(zip(TERMS, change_stats(1, 2, t)))
        assert g["match_gender_F"] == 0 and g["match_gender_M"] == 0

    def test_absdiff_and_sum(self):
        t = ilv([1, 2], popularity=[30.0, 50.0], followers=[10.0, 4.0], mean_distance=[100.0, 200.0])
        g = dict(zip(TERMS, change_stats(1, 2, t)))
        assert g["absdiff_popularity"] == 20
        assert g["absdiff_followers"] == 6
        assert g["nodecov_mean_distance"] == 300

    def test_symmetric(self):
        t = ilv([1, 2], gender=[1, 1], popularity=[3.0, 9.0], mean_distance=[1.0, 2.0])
        assert np.array_equal(change_stats(1, 2, t), change_stats(2, 1, t))

    def test_missing_covariate(self):
        with pytest.raises(ValidationError):
            change_stats(1, 2, ilv([1, 2], popularity=[1.0, math.nan]))


def dyn_of(snaps, entry):
    return DynamicNetwork(tuple(YearSnapshot(y, frozenset(e)) for y, e in snaps),
                          frozenset(entry), entry)


class TestDyadTable:
    def test_tied_dyad_not_at_risk(self):
        d = dyn_of([(2000, {(1, 2)}), (2001, {(1, 2), (2, 3)})], {1: 2000, 2: 2000, 3: 2000})
        table = build_dyad_table(d, ilv([1, 2, 3]), (2000, 2001))
        dyads = {o.dyad: o.y for o in table.observations()}
        assert dyads == {(1, 3): 0, (2, 3): 1}
        assert table.n_at_risk == 2 and table.n_formed == 1 and table.n_transitions == 1

    def test_three_untied_nodes(self):
        d = dyn_of([(2000, set()), (2001, set())], {1: 2000, 2: 2000, 3: 2000})
        assert len(list(build_dyad_table(d, ilv([1, 2, 3]), (2000, 2001)).observations())) == 3

    def test_late_entry_excluded(self):
        d = dyn_of([(2000, set()), (2001, {(1, 3)}), (2002, {(1, 3)})], {1: 2000, 2: 2000, 3: 2001})
        table = build_dyad_table(d, ilv([1, 2, 3]), (2000, 2002))
        first = [o.dyad for o in table.observations() if o.transition == (2000, 2001)]
        assert first == [(1, 2)]
        second = {o.dyad for o in table.observations() if o.transition == (2001, 2002)}
        assert second == {(1, 2), (2, 3)}

    def test_short_period(self):
        d = dyn_of([(2000, set()), (2001, set())], {1: 2000, 2: 2000})
        with pytest.raises(ValidationError, match="fewer than two"):
            build_dyad_table(d, ilv([1, 2]), (2000, 2000))

    def test_period_outside(self):
        d = dyn_of([(2000, set()), (2001, set())], {1: 2000, 2: 2000})
        with pytest.raises(ValidationError, match="outside"):
            build_dyad_table(d, ilv([1, 2]), (1999, 2001))

    def test_observations_carry_raw_stats(self):
        d = dyn_of([(2000, set()), (2001, {(1, 2)})], {1: 2000, 2: 2000})
        (o,) = build_dyad_table(d, ilv([1, 2], popularity=[10.0, 4.0]), (2000, 2001)).observations()
        assert o.stats[TERMS.index("absdiff_popularity")] == 6.0 and o.y == 1


class TestFit:
    def test_edges_closed_form(self):
        data = [obs(1, k=k) for k in range(2)] + [obs(0, k=k) for k in range(2, 10)]
        fit = fit_formation(data, FormationTermSpec())
        assert abs(fit.theta["edges"] - math.log(2 / 8)) < 1e-8
        assert abs(fit.theta["edges"] - (-1.3862944)) < 1e-7
        assert fit.n_at_risk == 10 and fit.n_formed == 2
        assert fit.se["edges"] == pytest.approx(math.sqrt(1 / 2 + 1 / 8), rel=1e-8)

    def test_constant_stats_reduce_to_logit(self):
        # every dyad shares the same statistics, so only the edges rate is identified
        data = [obs(int(k < 7), {"absdiff_popularity": 0.0}, k=k) for k in range(30)]
        fit = fit_formation(data, FormationTermSpec())
        assert fit.theta["edges"] == pytest.approx(math.log(7 / 23), abs=1e-10)

    def test_matches_direct_maximisation(self, panel):
        dyn, ilvs = panel
        table = build_dyad_table(dyn, ilvs, (2000, 2006))
        spec = FormationTermSpec(("match_gender_M", "absdiff_popularity"))
        fit = fit_formation(table, spec)
        rows = list(table.observations())
        X = np.array([o.stats[[TERMS.index(t) for t in spec.terms]] for o in rows])
        y = np.array([o.y for o in rows], dtype=float)
        th, ll = logit_oracle(X, y)
        assert fit.coef == pytest.approx(th, abs=1e-4)
        assert fit.log_likelihood == pytest.approx(ll, abs=1e-8)
        assert fit.aic == pytest.approx(-2 * fit.log_likelihood + 2 * 3)

    def test_table_and_observation_list_agree(self, panel):
        dyn, ilvs = panel
        table = build_dyad_table(dyn, ilvs, (2000, 2004))
        spec = FormationTermSpec.from_groups(["gender", "popularity"])
        a = fit_formation(table, spec)
        b = fit_formation(list(table.observations()), spec)
        assert a.coef == pytest.approx(b.coef, abs=1e-9)
        assert a.log_likelihood == pytest.approx(b.log_likelihood, abs=1e-7)
        assert (a.n_at_risk, a.n_formed, a.n_transitions) == (b.n_at_risk, b.n_formed, b.n_transitions)

    def test_effect_sizes(self, panel):
        dyn, ilvs = panel
        fit = fit_formation(build_dyad_table(dyn, ilvs, (2000, 2006)), FormationTermSpec(("match_gender_M",)))
        for t in fit.terms.terms:
            assert fit.effect_sizes[t] == math.exp(fit.theta[t])
        assert (fit.effect_sizes["match_gender_M"] > 1) == (fit.theta["match_gender_M"] > 0)

    def test_all_formed(self):
        with pytest.raises(SeparationError):
            fit_formation([obs(1, k=k) for k in range(5)], FormationTermSpec())

    def test_quasi_separation_detected(self):
        data = [obs(1, {"match_gender_M": 1}, k=k) for k in range(4)]
        data += [obs(0, {"match_gender_M": 0}, k=k) for k in range(4, 10)]
        data += [obs(1, {"match_gender_M": 0}, k=10)]
        with pytest.raises(SeparationError):
            fit_formation(data, FormationTermSpec(("match_gender_M",)))

    def test_empty(self):
        with pytest.raises(FitError):
            fit_formation([], FormationTermSpec())

    def test_collinear_terms_named(self):
        data = [obs(k % 3 == 0, {"absdiff_popularity": k, "absdiff_followers": 2 * k}, k=k) for k in range(12)]
        with pytest.raises(RankDeficiencyError) as err:
            fit_formation(data, FormationTermSpec(("absdiff_popularity", "absdiff_followers")))
        assert "absdiff_followers" in str(err.value)
        assert tuple(err.value.terms) == ("absdiff_followers",)

    def test_to_dict(self):
        data = [obs(1, k=k) for k in range(2)] + [obs(0, k=k) for k in range(2, 10)]
        d = fit_formation(data, FormationTermSpec()).to_dict()
        assert d["counts"] == {"transitions": 1, "at_risk_dyads": 10, "formed_ties": 2}
        assert d["coefficients"][0]["effect_size"] == pytest.approx(0.25)


class TestEnumeration:
    def test_sixteen_models(self, panel):
        dyn, ilvs = panel
        rows = enumerate_formation_models(build_dyad_table(dyn, ilvs, (2000, 2006)))
        assert len(rows) == 16
        ok = [r for r in rows if not r.failed]
        assert ok[0].delta_aic == 0.0
        assert [r.fit.aic for r in ok] == sorted(r.fit.aic for r in ok)
        (sel,) = [r for r in rows if r.selected]
        assert "gender" in sel.terms.groups and "popularity" in sel.terms.groups

    def test_selection_prefers_more_groups(self):
        # followers carries no signal: adding it costs < 2 AIC, so the larger model is selected
        rng = np.random.default_rng(5)
        ilvs = random_ilvs(range(60), rng, scale={"popularity": 20.0, "followers": 1.0})
        dyn = simulate_formation_panel({"edges": -3.0, "absdiff_popularity": -0.05}, ilvs, 5, rng)
        rows = enumerate_formation_models(build_dyad_table(dyn, ilvs, (2000, 2005)),
                                          ["popularity", "followers"])
        best = {r.terms.groups: r for r in rows}
        assert best[("popularity",)].best_set
        pick = next(r for r in rows if r.selected)
        in_set = [r for r in rows if r.best_set]
        assert len(pick.terms.groups) == max(len(r.terms.groups) for r in in_set)

    def test_parallel_matches_serial(self, panel):
        dyn, ilvs = panel
        table = build_dyad_table(dyn, ilvs, (2000, 2003))
        a = enumerate_formation_models(table, ["gender", "popularity"], n_jobs=1)
        b = enumerate_formation_models(table, ["gender", "popularity"], n_jobs=2)
        assert [(r.terms, r.fit.aic) for r in a] == [(r.terms, r.fit.aic) for r in b]


def edges_only_fit(theta, period=(2000, 2001)):
    data = [obs(1, k=0), obs(0, k=1)]
    fit = fit_formation(data, FormationTermSpec())
    fit.theta = {"edges": theta}
    fit.period = period
    return fit


class TestSimulation:
    def test_vanishing_probability(self, panel):
        dyn, ilvs = panel
        fit = edges_only_fit(-50.0, (2000, 2006))
        sims = simulate_formation(fit, dyn, ilvs, seed=1)
        assert len(sims) == 6
        for snap in sims:
            assert snap.edges == dyn.snapshot(snap.year - 1).edges

    def test_binomial_half(self):
        ids = range(142)  # 142 * 141 / 2 = 10011 dyads
        dyn = dyn_of([(2000, set()), (2001, set())], {v: 2000 for v in ids})
        table_ilvs = ilv(list(ids))
        (snap,) = simulate_formation(edges_only_fit(0.0), dyn, table_ilvs, seed=7)
        n = 142 * 141 // 2
        lo, hi = stats.binom.interval(0.999, n, 0.5)
        assert lo <= len(snap.edges) <= hi

    def test_deterministic(self, panel):
        dyn, ilvs = panel
        fit = fit_formation(build_dyad_table(dyn, ilvs, (2000, 2006)), FormationTermSpec(("match_gender_M",)))
        assert simulate_formation(fit, dyn, ilvs, seed=3) == simulate_formation(fit, dyn, ilvs, seed=3)
        assert simulate_formation(fit, dyn, ilvs, seed=3) != simulate_formation(fit, dyn, ilvs, seed=4)

    def test_existing_ties_persist(self, panel):
        dyn, ilvs = panel
        fit = edges_only_fit(-2.0, (2000, 2006))
        for snap in simulate_formation(fit, dyn, ilvs, seed=0):
            assert dyn.snapshot(snap.year - 1).edges <= snap.edges


class TestGof:
    def test_rank_p_extremes(self):
        sims = np.arange(100)
        assert rank_p_value(1000, sims) == pytest.approx(2 / 101)
        assert rank_p_value(-5, sims) == pytest.approx(2 / 101)
        assert rank_p_value(2 / 101, sims) > 0

    def test_rank_p_central(self):
        assert rank_p_value(50, np.arange(101)) == pytest.approx(1.0)
        assert rank_p_value(49.5, np.arange(100)) == pytest.approx(1.0)

    def test_default_n_sims(self):
        assert inspect.signature(formation_gof).parameters["n_sims"].default == 100

    def test_structural_stats_small_graph(self):
        # path 0-1-2 plus isolate 3
        A = np.zeros((4, 4), dtype=bool)
        A[0, 1] = A[1, 0] = A[1, 2] = A[2, 1] = True
        s = structural_stats(A)
        assert s["degree_0"] == 1 and s["degree_1"] == 2 and s["degree_2"] == 1
        assert s["esp_0"] == 2
        assert s["dist_1"] == 2 and s["dist_2"] == 1 and s["dist_inf"] == 3

    def test_triangle_shared_partners(self):
        A = ~np.eye(3, dtype=bool)
        s = structural_stats(A)
        assert s["esp_1"] == 3 and s["dist_1"] == 3 and "dist_inf" not in s

    def test_table_shape(self, panel):
        dyn, ilvs = panel
        fit = fit_formation(build_dyad_table(dyn, ilvs, (2000, 2006)),
                            FormationTermSpec(("match_gender_M", "absdiff_popularity")))
        rows = formation_gof(fit, dyn, ilvs, n_sims=30, seed=2)
        names = [r.statistic for r in rows]
        assert names[:3] == ["edges", "match_gender_M", "absdiff_popularity"]
        assert any(n.startswith("degree_") for n in names)
        assert any(n.startswith("esp_") for n in names)
        assert any(n.startswith("dist_") for n in names)
        for r in rows:
            assert r.sim_lo95 <= r.sim_mean <= r.sim_hi95
            assert 0 < r.p <= 1
        # the edges statistic counts newly formed ties
        assert rows[0].observed == fit.n_formed

    def test_deterministic(self, panel):
        dyn, ilvs = panel
        fit = fit_formation(build_dyad_table(dyn, ilvs, (2000, 2003)), FormationTermSpec())
        a = formation_gof(fit, dyn, ilvs, n_sims=10, seed=9)
        b = formation_gof(fit, dyn, ilvs, n_sims=10, seed=9)
        assert a == b

    def test_on_built_network(self):
        events = [(1, 2, 1990), (2, 3, 1991), (1, 3, 1992), (3, 4, 1992), (4, 5, 1993), (1, 5, 1994)]
        dyn = build_dynamic_network(events, (1990, 1994), nodes=range(1, 7), entry_year={6: 1990})
        ilvs = ilv(list(range(1, 7)))
        fit = fit_formation(build_dyad_table(dyn, ilvs, (1990, 1994)), FormationTermSpec())
        rows = formation_gof(fit, dyn, ilvs, n_sims=20, seed=0)
        assert rows[0].statistic == "edges" and rows[0].observed == fit.n_formed
