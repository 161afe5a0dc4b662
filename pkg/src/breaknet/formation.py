"""
Tie-formation model for yearly collaboration panels.

Between consecutive snapshots, every untied pair of active artists may form a
tie. With dyad-independent terms the conditional likelihood of the
formation half of a separable temporal ERGM factorises over these at-risk
dyads, so the conditional MLE is a logistic regression of "tie formed" on
the dyad's change statistics.
"""

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import shortest_path

from .errors import FitError, RankDeficiencyError, SeparationError, ValidationError
from .netcore import YearSnapshot
from .parallel import parallel_map
from .statutil import aic as _aic
from .statutil import normal_upper_tail

TERMS = (
    "edges",
    "match_gender_F",
    "match_gender_M",
    "absdiff_popularity",
    "absdiff_followers",
    "nodecov_mean_distance",
)
TERM_GROUPS = {
    "gender": ("match_gender_F", "match_gender_M"),
    "popularity": ("absdiff_popularity",),
    "followers": ("absdiff_followers",),
    "mean_distance": ("nodecov_mean_distance",),
}
DIVERGENCE_LIMIT = 30.0


@dataclass(frozen=True)
class FormationTermSpec:
    terms: tuple = ("edges",)

    def __post_init__(self):
        terms = tuple(self.terms)
        unknown = [t for t in terms if t not in TERMS]
        if unknown:
            raise ValueError(f"unknown formation terms {unknown}")
        if len(set(terms)) != len(terms):
            raise ValueError(f"duplicate terms in {terms}")
        if "edges" not in terms:
            terms = ("edges",) + terms
        object.__setattr__(self, "terms", terms)

    @classmethod
    def from_groups(cls, groups):
        """Edges plus the terms of each covariate group, in canonical order."""
        wanted = set(itertools.chain.from_iterable(TERM_GROUPS[g] for g in groups))
        return cls(tuple(t for t in TERMS if t == "edges" or t in wanted))

    @property
    def groups(self):
        return tuple(g for g, ts in TERM_GROUPS.items() if any(t in self.terms for t in ts))

    @property
    def label(self):
        return "+".join(self.terms)

    def __len__(self):
        return len(self.terms)


def _stats_arrays(gi, gj, pi, pj, fi, fj, mi, mj):
    return {
        "edges": np.ones(np.broadcast(gi, gj).shape),
        "match_gender_F": ((gi == -1) & (gj == -1)).astype(float),
        "match_gender_M": ((gi == 1) & (gj == 1)).astype(float),
        "absdiff_popularity": np.abs(pi - pj),
        "absdiff_followers": np.abs(fi - fj),
        "nodecov_mean_distance": mi + mj,
    }


def change_stats(i, j, ilvs, terms=TERMS):
    """Change-statistic vector of dyad (i, j) for ``terms`` (raw covariates)."""
    terms = terms.terms if isinstance(terms, FormationTermSpec) else tuple(terms)
    vals = {c: (ilvs.value(i, c), ilvs.value(j, c)) for c in ("gender", "popularity", "followers", "mean_distance")}
    st = _stats_arrays(
        np.float64(vals["gender"][0]), np.float64(vals["gender"][1]),
        vals["popularity"][0], vals["popularity"][1],
        vals["followers"][0], vals["followers"][1],
        vals["mean_distance"][0], vals["mean_distance"][1],
    )
    out = np.array([float(st[t]) for t in terms])
    if np.isnan(out).any():
        raise ValidationError(f"missing covariate for dyad ({i}, {j})")
    return out


@dataclass(frozen=True)
class DyadObservation:
    transition: tuple  # (t, t + 1)
    dyad: tuple
    y: int
    stats: np.ndarray  # aligned with TERMS


@dataclass
class _Transition:
    year: int
    members: np.ndarray  # table positions of the risk set at `year`
    tied: np.ndarray  # bool matrix over members, ties at `year`
    next_tied: np.ndarray  # bool matrix over members, ties at `year + 1`

    def at_risk(self):
        """Positions (i, j) and outcome of every at-risk dyad, i < j."""
        a, b = np.triu_indices(self.members.size, 1)
        keep = ~self.tied[a, b]
        a, b = a[keep], b[keep]
        return self.members[a], self.members[b], self.next_tied[a, b]


@dataclass
class DyadTable:
    """
    At-risk dyads for every transition of a period.

    Node covariates are held once (``covariates``, aligned with ``ids``);
    change statistics are computed on demand.
    """

    ids: tuple
    covariates: dict
    transitions: list
    period: tuple

    def __len__(self):
        return self.n_at_risk

    @property
    def n_transitions(self):
        return len(self.transitions)

    @property
    def n_at_risk(self):
        return int(sum(tr.members.size * (tr.members.size - 1) // 2 - int(np.triu(tr.tied, 1).sum())
                       for tr in self.transitions))

    @property
    def n_formed(self):
        return int(sum(tr.at_risk()[2].sum() for tr in self.transitions))

    def stats(self, i, j, terms):
        c = self.covariates
        st = _stats_arrays(
            c["gender"][i], c["gender"][j], c["popularity"][i], c["popularity"][j],
            c["followers"][i], c["followers"][j], c["mean_distance"][i], c["mean_distance"][j],
        )
        X = np.column_stack([st[t] for t in terms]) if terms else np.zeros((np.size(i), 0))
        if np.isnan(X).any():
            bad = [t for k, t in enumerate(terms) if np.isnan(X[:, k]).any()]
            raise ValidationError(f"missing covariates for terms {bad}; impute first")
        return X

    def aggregated(self):
        """Unique at-risk pairs with their number of trials and formations."""
        n = len(self.ids)
        trials = np.zeros((n, n), dtype=np.int32)
        formed = np.zeros((n, n), dtype=np.int32)
        for tr in self.transitions:
            i, j, y = tr.at_risk()
            np.add.at(trials, (i, j), 1)
            np.add.at(formed, (i, j), y.astype(np.int32))
        i, j = np.nonzero(trials)
        return i, j, trials[i, j].astype(float), formed[i, j].astype(float)

    def observations(self):
        """Iterate the table as ``DyadObservation`` records."""
        for tr in self.transitions:
            i, j, y = tr.at_risk()
            X = self.stats(i, j, TERMS)
            for k in range(i.size):
                yield DyadObservation(
                    (tr.year, tr.year + 1), (self.ids[i[k]], self.ids[j[k]]), int(y[k]), X[k]
                )


def _tie_matrix(snapshot, pos, size):
    M = np.zeros((size, size), dtype=bool)
    for a, b in snapshot.edges:
        if a in pos and b in pos:
            M[pos[a], pos[b]] = M[pos[b], pos[a]] = True
    return M


def build_dyad_table(dynamic, ilvs, period):
    """
    At-risk dyads for each transition t -> t+1 with both years in ``period``.

    The risk set at t holds artists whose entry year is at most t. A pair is
    at risk when untied at t; its outcome is whether it is tied at t+1.
    """
    start, end = int(period[0]), int(period[1])
    if end - start < 1:
        raise ValidationError(f"period {period} spans fewer than two years")
    years = dynamic.years
    if start < years[0] or end > years[-1]:
        raise ValidationError(f"period {period} outside network years {years[0]}-{years[-1]}")
    ids = tuple(sorted(v for v in dynamic.node_universe if v in dynamic.entry_year))
    missing = [v for v in ids if v not in set(ilvs.ids)]
    if missing:
        raise ValidationError(f"artists {missing[:5]} have no covariate row")
    rows = ilvs.index(ids)
    covariates = {c: np.asarray(ilvs.column(c))[rows] for c in ("gender", "popularity", "followers", "mean_distance")}
    entry = np.array([dynamic.entry_year[v] for v in ids])
    transitions = []
    for t in range(start, end):
        members = np.flatnonzero(entry <= t)
        pos = {ids[m]: k for k, m in enumerate(members)}
        tied = _tie_matrix(dynamic.snapshot(t), pos, members.size)
        nxt = _tie_matrix(dynamic.snapshot(t + 1), pos, members.size)
        transitions.append(_Transition(t, members, tied, nxt))
    return DyadTable(ids, covariates, transitions, (start, end))


@dataclass
class FormationFit:
    terms: FormationTermSpec
    theta: dict
    se: dict
    z: dict
    p: dict
    effect_sizes: dict
    log_likelihood: float
    aic: float
    n_transitions: int
    n_at_risk: int
    n_formed: int
    converged: bool = True
    iterations: int = 0
    period: tuple = None
    covariance: np.ndarray = field(default=None, repr=False)

    @property
    def coef(self):
        return np.array([self.theta[t] for t in self.terms.terms])

    def to_dict(self):
        def num(v):
            return None if not math.isfinite(v) else v

        return {
            "terms": list(self.terms.terms),
            "period": list(self.period) if self.period else None,
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "converged": self.converged,
            "iterations": self.iterations,
            "counts": {
                "transitions": self.n_transitions,
                "at_risk_dyads": self.n_at_risk,
                "formed_ties": self.n_formed,
            },
            "coefficients": [
                {
                    "term": t,
                    "estimate": self.theta[t],
                    "se": num(self.se[t]),
                    "z": num(self.z[t]),
                    "p": num(self.p[t]),
                    "effect_size": self.effect_sizes[t],
                }
                for t in self.terms.terms
            ],
        }


def _design(data, terms):
    """(X, trials, successes, counts) from a DyadTable or DyadObservation list."""
    if isinstance(data, DyadTable):
        i, j, n, y = data.aggregated()
        X = data.stats(i, j, terms)
        return X, n, y, (data.n_transitions, int(n.sum()), int(y.sum())), data.period
    obs = list(data)
    if not obs:
        raise FitError("no dyad observations")
    cols = [TERMS.index(t) for t in terms]
    X = np.array([o.stats[cols] for o in obs], dtype=float).reshape(len(obs), len(terms))
    y = np.array([o.y for o in obs], dtype=float)
    trans = {o.transition for o in obs}
    years = sorted(t for tr in trans for t in tr)
    return X, np.ones(len(obs)), y, (len(trans), len(obs), int(y.sum())), (years[0], years[-1])


def _check_rank(Z, terms):
    dependent, basis = [], np.zeros((Z.shape[0], 0))
    for k in range(Z.shape[1]):
        cand = np.column_stack([basis, Z[:, k]])
        if np.linalg.matrix_rank(cand) > basis.shape[1]:
            basis = cand
        else:
            dependent.append(terms[k])
    if dependent:
        raise RankDeficiencyError(f"collinear change statistics: {', '.join(dependent)}", dependent)


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def logistic_irls(X, n, y, tol=1e-10, max_iter=50):
    """
    Binomial logistic regression by iteratively reweighted least squares.

    ``n`` holds trials and ``y`` successes per row. Returns
    ``(theta, covariance, loglik, iterations, converged)``.
    """
    theta = np.zeros(X.shape[1])
    rate = y.sum() / n.sum()
    theta[0] = math.log(rate / (1 - rate))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ theta
        mu = n * _logistic(eta)
        w = n * np.exp(-_log1pexp(eta) - _log1pexp(-eta))
        info = X.T @ (X * w[:, None])
        step = np.linalg.solve(info, X.T @ (y - mu))
        theta = theta + step
        if np.any(np.abs(theta) > DIVERGENCE_LIMIT) or not np.all(np.isfinite(theta)):
            raise SeparationError("coefficients diverge; outcomes are (quasi-)separated")
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    eta = X @ theta
    w = n * np.exp(-_log1pexp(eta) - _log1pexp(-eta))
    info = X.T @ (X * w[:, None])
    cov = np.linalg.inv(info)
    ll = float(np.sum(y * eta - n * _log1pexp(eta)))
    return theta, cov, ll, it, converged


def fit_formation(observations, terms):
    """
    Conditional MLE of a dyad-independent formation model.

    ``observations`` is a ``DyadTable`` or an iterable of ``DyadObservation``.
    Non-intercept statistics are centred and scaled internally for
    conditioning; estimates and covariances are mapped back to raw units.
    """
    if not isinstance(terms, FormationTermSpec):
        terms = FormationTermSpec(tuple(terms))
    names = terms.terms
    X, n, y, counts, period = _design(observations, names)
    if n.sum() == 0:
        raise FitError("no at-risk dyads")
    if y.sum() == 0 or y.sum() == n.sum():
        raise SeparationError("every at-risk dyad has the same outcome; no finite MLE")
    e = names.index("edges")
    mean = np.zeros(len(names))
    sd = np.ones(len(names))
    tot = n.sum()
    for k in range(len(names)):
        if k == e:
            continue
        mean[k] = np.sum(n * X[:, k]) / tot
        sd[k] = math.sqrt(np.sum(n * (X[:, k] - mean[k]) ** 2) / tot)
    Z = X.copy()
    for k in range(len(names)):
        if k != e:
            if sd[k] == 0:
                raise RankDeficiencyError(f"collinear change statistics: {names[k]} is constant", [names[k]])
            Z[:, k] = (X[:, k] - mean[k]) / sd[k]
    if Z.shape[0] < 200_000:
        _check_rank(Z, names)
    order = [e] + [k for k in range(len(names)) if k != e]
    try:
        th_z, cov_z, ll, iters, ok = logistic_irls(Z[:, order], n, y)
    except np.linalg.LinAlgError:
        _check_rank(Z, names)
        # full-rank design with a singular information matrix: fitted
        # probabilities have collapsed to 0 or 1
        raise SeparationError("information matrix is singular; outcomes are (quasi-)separated")
    inv = np.argsort(order)
    th_z, cov_z = th_z[inv], cov_z[np.ix_(inv, inv)]
    # raw = J @ z-scale coefficients
    J = np.eye(len(names))
    for k in range(len(names)):
        if k != e:
            J[k, k] = 1.0 / sd[k]
            J[e, k] = -mean[k] / sd[k]
    theta = J @ th_z
    cov = J @ cov_z @ J.T
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    z = theta / se
    return FormationFit(
        terms=terms,
        theta=dict(zip(names, theta.tolist())),
        se=dict(zip(names, se.tolist())),
        z=dict(zip(names, z.tolist())),
        p={t: 2.0 * normal_upper_tail(abs(v)) for t, v in zip(names, z)},
        effect_sizes={t: math.exp(v) for t, v in zip(names, theta)},
        log_likelihood=ll,
        aic=_aic(ll, len(names)),
        n_transitions=counts[0],
        n_at_risk=counts[1],
        n_formed=counts[2],
        converged=ok,
        iterations=iters,
        period=period,
        covariance=cov,
    )


@dataclass
class FormationRow:
    terms: FormationTermSpec
    fit: object = None
    error: str = ""
    delta_aic: float = math.nan
    best_set: bool = False
    selected: bool = False

    @property
    def failed(self):
        return self.fit is None or not self.fit.converged


def _fit_formation_row(args):
    table, spec = args
    try:
        return FormationRow(spec, fit_formation(table, spec))
    except (FitError, ValidationError) as exc:
        return FormationRow(spec, error=str(exc))


def enumerate_formation_models(table, candidate_groups=tuple(TERM_GROUPS), n_jobs=1):
    """
    Fit edges plus every subset of the covariate groups, ranked by AIC.

    ``selected`` marks, within the dAIC < 2 set, the model with the most
    covariate groups (lowest AIC on ties).
    """
    groups = tuple(candidate_groups)
    specs = [
        FormationTermSpec.from_groups(c)
        for r in range(len(groups) + 1)
        for c in itertools.combinations(groups, r)
    ]
    rows = parallel_map(_fit_formation_row, [(table, s) for s in specs], n_jobs)
    ok = sorted((r for r in rows if not r.failed), key=lambda r: r.fit.aic)
    bad = [r for r in rows if r.failed]
    if ok:
        best = ok[0].fit.aic
        for r in ok:
            r.delta_aic = r.fit.aic - best
            r.best_set = r.delta_aic < 2
        pick = max((r for r in ok if r.best_set), key=lambda r: (len(r.terms.groups), -r.fit.aic))
        pick.selected = True
    return ok + bad


FORMATION_TABLE_HEADER = ["terms", "loglik", "aic", "delta_aic", "converged"]


def formation_table_rows(rows):
    return [
        [
            r.terms.label,
            "" if r.fit is None else float(r.fit.log_likelihood),
            "" if r.fit is None else float(r.fit.aic),
            "" if r.failed else float(r.delta_aic),
            "false" if r.failed else "true",
        ]
        for r in rows
    ]


def _logistic(x):
    return np.exp(-_log1pexp(-x))


def _transition_probs(fit, table):
    names = fit.terms.terms
    coef = fit.coef
    out = []
    for tr in table.transitions:
        i, j, y = tr.at_risk()
        G = table.stats(i, j, names)
        out.append((tr, i, j, y, G, _logistic(G @ coef)))
    return out


def simulate_formation(fit, dynamic, ilvs, seed, period=None):
    """
    One simulated year-(t+1) snapshot per transition of ``period``.

    Each transition starts from the observed year-t ties; at-risk dyads form
    independently with their fitted probability and existing ties persist.
    """
    if not fit.converged:
        raise FitError("cannot simulate from a non-converged fit")
    table = build_dyad_table(dynamic, ilvs, period or fit.period)
    rng = np.random.default_rng(seed)
    out = []
    for tr, i, j, _, _, p in _transition_probs(fit, table):
        formed = rng.random(p.size) < p
        a, b = np.nonzero(np.triu(tr.tied, 1))
        edges = {(table.ids[tr.members[x]], table.ids[tr.members[y]]) for x, y in zip(a, b)}
        edges |= {(table.ids[x], table.ids[y]) for x, y in zip(i[formed], j[formed])}
        out.append(YearSnapshot(tr.year + 1, frozenset(edges)))
    return out


UNREACHABLE_LABEL = "inf"


def structural_stats(adj):
    """
    Degree, edgewise-shared-partner and geodesic-distance counts of a
    symmetric boolean adjacency matrix, keyed ``degree_k``, ``esp_k``,
    ``dist_k`` and ``dist_inf``.
    """
    A = sparse.csr_matrix(adj.astype(np.int64))
    n = A.shape[0]
    out = Counter()
    deg = np.asarray(A.sum(axis=1)).ravel()
    for k, c in zip(*np.unique(deg, return_counts=True)):
        out[f"degree_{int(k)}"] += int(c)
    if A.nnz:
        shared = (A @ A).multiply(A)
        a, b = sparse.triu(A, 1).nonzero()
        sp = np.asarray(shared[a, b]).ravel()
        for k, c in zip(*np.unique(sp, return_counts=True)):
            out[f"esp_{int(k)}"] += int(c)
    if n > 1:
        D = shortest_path(A, method="D", unweighted=True, directed=False)
        iu = np.triu_indices(n, 1)
        d = D[iu]
        finite = np.isfinite(d)
        for k, c in zip(*np.unique(d[finite], return_counts=True)):
            out[f"dist_{int(k)}"] += int(c)
        if (~finite).any():
            out[f"dist_{UNREACHABLE_LABEL}"] += int((~finite).sum())
    return out


def rank_p_value(observed, simulated):
    """
    Two-sided Monte Carlo p-value 2 * min(1 + #{sim <= obs}, 1 + #{sim >= obs}) / (n + 1),
    capped at 1.
    """
    sim = np.asarray(simulated, dtype=float)
    lo = 1 + int(np.sum(sim <= observed))
    hi = 1 + int(np.sum(sim >= observed))
    return min(1.0, 2.0 * min(lo, hi) / (sim.size + 1))


@dataclass(frozen=True)
class GofRow:
    statistic: str
    observed: float
    sim_mean: float
    sim_lo95: float
    sim_hi95: float
    p: float


GOF_HEADER = ["statistic", "observed", "sim_mean", "sim_lo95", "sim_hi95", "p"]


def _stat_sort_key(name):
    kind, _, k = name.rpartition("_")
    return (kind, math.inf if k == UNREACHABLE_LABEL else int(k))


def formation_gof(fit, dynamic, ilvs, n_sims=100, seed=0, structural=True, period=None):
    """
    Compare observed formation networks with ``n_sims`` simulated ones.

    Global statistics are the fitted term sums over newly formed ties,
    summed across transitions. Structural statistics are computed on the
    formation network of each transition (year-t ties plus ties formed by
    t+1, over the year-t risk set) and summed across transitions.
    """
    if not fit.converged:
        raise FitError("cannot run GOF on a non-converged fit")
    table = build_dyad_table(dynamic, ilvs, period or fit.period)
    names = fit.terms.terms
    trans = _transition_probs(fit, table)

    obs_global = np.zeros(len(names))
    obs_struct = Counter()
    for tr, i, j, y, G, _ in trans:
        obs_global += G[y].sum(axis=0)
        if structural:
            obs_struct.update(structural_stats(tr.tied | tr.next_tied))

    sim_global = np.zeros((n_sims, len(names)))
    sim_struct = []
    children = np.random.SeedSequence(seed).spawn(n_sims)
    for s, child in enumerate(children):
        rng = np.random.default_rng(child)
        counts = Counter()
        for tr, i, j, y, G, p in trans:
            formed = rng.random(p.size) < p
            sim_global[s] += G[formed].sum(axis=0)
            if structural:
                A = tr.tied.copy()
                a = np.searchsorted(tr.members, i[formed])
                b = np.searchsorted(tr.members, j[formed])
                A[a, b] = A[b, a] = True
                counts.update(structural_stats(A))
        sim_struct.append(counts)

    rows = []

    def add(name, obs, sims):
        sims = np.asarray(sims, dtype=float)
        rows.append(GofRow(
            name, float(obs), float(sims.mean()),
            float(np.percentile(sims, 2.5)), float(np.percentile(sims, 97.5)),
            rank_p_value(obs, sims),
        ))

    for k, name in enumerate(names):
        add(name, obs_global[k], sim_global[:, k])
    if structural:
        keys = set(obs_struct).union(*sim_struct)
        for key in sorted(keys, key=_stat_sort_key):
            add(key, obs_struct.get(key, 0), [c.get(key, 0) for c in sim_struct])
    return rows
