"""
Simulators with known parameters, used for parameter-recovery and
calibration checks.
"""

import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .errors import FitError, ValidationError
from .formation import FormationTermSpec, _logistic, _stats_arrays, fit_formation, build_dyad_table
from .ingest import IlvTable
from .netcore import CollabNetwork, DynamicNetwork, YearSnapshot
from .oada import Diffusion, NbdaModelSpec, OadaData, _rates, fit_oada, lrt_social
from .parallel import parallel_map

GENDER_CODES = (-1, 0, 1)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def erdos_renyi_network(n, density, seed=None, w_max=1, ids=None):
    """G(n, p) graph with integer weights drawn uniformly from 1..w_max."""
    rng = _rng(seed)
    ids = list(range(n)) if ids is None else list(ids)
    a, b = np.triu_indices(len(ids), 1)
    keep = rng.random(a.size) < density
    w = rng.integers(1, w_max + 1, size=int(keep.sum()))
    edges = {(ids[i], ids[j]): int(x) for i, j, x in zip(a[keep], b[keep], w)}
    return CollabNetwork(ids, edges)


def random_ilvs(ids, seed=None, gender_probs=(0.2, 0.4, 0.4), scale=None):
    """
    Random covariates: gender codes (-1, 0, +1) with ``gender_probs``;
    popularity, followers and mean distance standard normal times
    ``scale[name]`` (default 1).
    """
    rng = _rng(seed)
    ids = tuple(ids)
    scale = scale or {}
    cols = {"gender": rng.choice(GENDER_CODES, size=len(ids), p=gender_probs).astype(float)}
    for name in ("popularity", "followers", "mean_distance"):
        cols[name] = rng.standard_normal(len(ids)) * scale.get(name, 1.0)
    return IlvTable(ids, cols)


def simulate_diffusion(network, spec, s, beta=(), seed=None, ilvs=None, events_per_year=1,
                       n_events=None, diffusion_id="sim"):
    """
    Simulate the order in which artists acquire a trait.

    Each step draws the next acquirer among the naive artists with
    probability proportional to its rate; informed status is updated after
    every event. Consecutive events are then bundled into tie groups of
    ``events_per_year``.
    """
    rng = _rng(seed)
    nodes = sorted(network.nodes)
    if not nodes:
        raise ValidationError("cannot simulate on an empty network")
    if spec.social and s < 0:
        raise ValueError("social transmission strength must be non-negative")
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != len(spec.ilvs):
        raise ValueError(f"expected {len(spec.ilvs)} ILV coefficients, got {beta.size}")
    W = network.weight_matrix(nodes)
    base = np.exp(ilvs.matrix(spec.ilvs, nodes) @ beta) if beta.size else np.ones(len(nodes))
    n_events = len(nodes) if n_events is None else min(n_events, len(nodes))
    naive = np.ones(len(nodes), dtype=bool)
    T = np.zeros(len(nodes))
    order = []
    for _ in range(n_events):
        R = np.where(naive, _rates(spec.variant, s, T, base), 0.0)
        pick = int(rng.choice(len(nodes), p=R / R.sum()))
        order.append(nodes[pick])
        naive[pick] = False
        T += W[:, pick]
    groups = tuple(
        (k, frozenset(order[p:p + events_per_year]))
        for k, p in enumerate(range(0, len(order), events_per_year))
    )
    return Diffusion(diffusion_id, groups, network)


def simulate_formation_panel(theta, ilvs, n_transitions, seed=None, start_year=2000,
                             initial_edges=(), entry_year=None):
    """
    Free-running formation panel: from ``initial_edges`` at ``start_year``,
    each year every untied active pair forms a tie with probability
    logistic(theta . g) and ties persist. Returns a DynamicNetwork with
    ``n_transitions + 1`` snapshots.
    """
    rng = _rng(seed)
    spec = FormationTermSpec(tuple(theta))
    coef = np.array([theta[t] for t in spec.terms])
    ids = tuple(ilvs.ids)
    n = len(ids)
    entry = {v: start_year for v in ids} if entry_year is None else dict(entry_year)
    ent = np.array([entry.get(v, math.inf) for v in ids])
    a, b = np.triu_indices(n, 1)
    c = {k: np.asarray(ilvs.column(k)) for k in ("gender", "popularity", "followers", "mean_distance")}
    st = _stats_arrays(c["gender"][a], c["gender"][b], c["popularity"][a], c["popularity"][b],
                       c["followers"][a], c["followers"][b], c["mean_distance"][a], c["mean_distance"][b])
    prob = _logistic(np.column_stack([st[t] for t in spec.terms]) @ coef)
    pos = {v: k for k, v in enumerate(ids)}
    tied = np.zeros((n, n), dtype=bool)
    for u, v in initial_edges:
        tied[pos[u], pos[v]] = tied[pos[v], pos[u]] = True
    snaps = [YearSnapshot(start_year, frozenset((min(u, v), max(u, v)) for u, v in initial_edges))]
    for t in range(start_year, start_year + n_transitions):
        active = (ent[a] <= t) & (ent[b] <= t)
        formed = active & ~tied[a, b] & (rng.random(a.size) < prob)
        tied[a[formed], b[formed]] = tied[b[formed], a[formed]] = True
        ii, jj = np.nonzero(np.triu(tied, 1))
        snaps.append(YearSnapshot(t + 1, frozenset((ids[x], ids[y]) for x, y in zip(ii, jj))))
    return DynamicNetwork(tuple(snaps), frozenset(ids),
                          MappingProxyType({v: int(y) for v, y in entry.items() if math.isfinite(y)}))


@dataclass(frozen=True)
class SimConfig:
    """
    Recovery experiment settings.

    ``spec`` is an ``NbdaModelSpec`` (diffusion experiments) or a
    ``FormationTermSpec`` (panel experiments); ``truth`` maps parameter
    names (``s``, ILV names, or formation terms) to true values.
    """

    spec: object
    truth: dict
    replicates: int = 100
    seed: int = 0
    n_nodes: int = 50
    density: float = 0.1
    w_max: int = 1
    n_diffusions: int = 20
    events_per_year: int = 1
    n_transitions: int = 10
    gender_probs: tuple = (0.2, 0.4, 0.4)
    ilv_scale: dict = field(default_factory=dict)
    level: float = 0.95

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not isinstance(self.spec, (NbdaModelSpec, FormationTermSpec)):
            raise TypeError("spec must be an NbdaModelSpec or FormationTermSpec")


@dataclass
class RecoveryReport:
    records: list
    failures: int = 0

    HEADER = ("replicate", "param", "truth", "estimate", "se", "covered", "converged")

    def rows(self):
        return [[r[h] for h in self.HEADER] for r in self.records]

    def summary(self):
        out = {}
        for name in dict.fromkeys(r["param"] for r in self.records):
            recs = [r for r in self.records if r["param"] == name and r["converged"]]
            if not recs:
                out[name] = {"n": 0}
                continue
            # fsum keeps the aggregates independent of replicate order
            mean = math.fsum(r["estimate"] for r in recs) / len(recs)
            ses = [r["se"] for r in recs if math.isfinite(r["se"])]
            out[name] = {
                "truth": recs[0]["truth"],
                "n": len(recs),
                "mean_estimate": mean,
                "bias": mean - recs[0]["truth"],
                "covered": sum(r["covered"] for r in recs),
                "coverage": sum(r["covered"] for r in recs) / len(recs),
                "mean_se": math.fsum(ses) / len(ses) if ses else math.nan,
            }
        return out


def _z(level):
    from scipy.stats import norm

    return float(norm.ppf(0.5 + level / 2))


def _record(rep, name, truth, est, se, z, converged):
    covered = bool(converged and math.isfinite(se) and abs(est - truth) <= z * se)
    return {"replicate": rep, "param": name, "truth": truth, "estimate": est, "se": se,
            "covered": covered, "converged": bool(converged)}


def simulate_oada_dataset(config, rng):
    spec = config.spec
    s = config.truth.get("s", 0.0) if spec.social else 0.0
    beta = [config.truth[n] for n in spec.ilvs]
    nets, ids_all = [], []
    for d in range(config.n_diffusions):
        ids = list(range(d * config.n_nodes, (d + 1) * config.n_nodes))
        ids_all.extend(ids)
        nets.append(erdos_renyi_network(config.n_nodes, config.density, rng, config.w_max, ids=ids))
    ilvs = random_ilvs(ids_all, rng, config.gender_probs, config.ilv_scale) if spec.ilvs else None
    out = [
        simulate_diffusion(net, spec, s, beta, rng, ilvs, config.events_per_year, diffusion_id=f"d{k}")
        for k, net in enumerate(nets)
    ]
    return OadaData(out, ilvs)


def _oada_replicate(args):
    config, rep, child = args
    rng = np.random.default_rng(child)
    data = simulate_oada_dataset(config, rng)
    try:
        fit = fit_oada(config.spec, data, seed=int(child.generate_state(1)[0]))
    except (FitError, ValueError):
        return [], 1
    z = _z(config.level)
    recs = [
        _record(rep, name, config.truth.get(name, 0.0), float(fit.estimates[name]),
                float(fit.se.get(name, math.nan)), z, fit.converged)
        for name in fit.estimates
    ]
    return recs, 0 if fit.converged else 1


def _formation_replicate(args):
    config, rep, child = args
    rng = np.random.default_rng(child)
    ids = list(range(config.n_nodes))
    ilvs = random_ilvs(ids, rng, config.gender_probs, config.ilv_scale)
    theta = {t: config.truth.get(t, 0.0) for t in config.spec.terms}
    start = 2000
    panel = simulate_formation_panel(theta, ilvs, config.n_transitions, rng, start_year=start)
    try:
        table = build_dyad_table(panel, ilvs, (start, start + config.n_transitions))
        fit = fit_formation(table, config.spec)
    except (FitError, ValidationError):
        return [], 1
    z = _z(config.level)
    recs = [_record(rep, t, theta[t], fit.theta[t], fit.se[t], z, fit.converged) for t in config.spec.terms]
    return recs, 0 if fit.converged else 1


def recovery_experiment(config, n_jobs=1):
    """
    Simulate, refit and score ``config.replicates`` independent datasets.

    Each replicate gets its own child seed of ``config.seed``, so the report
    depends only on the config. A parameter is covered when the Wald
    interval at ``config.level`` contains its true value.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.replicates)
    fn = _oada_replicate if isinstance(config.spec, NbdaModelSpec) else _formation_replicate
    results = parallel_map(fn, [(config, r, c) for r, c in enumerate(children)], n_jobs)
    records = [rec for recs, _ in results for rec in recs]
    return RecoveryReport(records, sum(f for _, f in results))


def _lrt_replicate(args):
    config, child = args
    rng = np.random.default_rng(child)
    data = simulate_oada_dataset(config, rng)
    asocial = NbdaModelSpec("asocial", config.spec.ilvs)
    try:
        social = fit_oada(config.spec, data, seed=int(child.generate_state(1)[0]))
        null = fit_oada(asocial, data)
    except (FitError, ValueError):
        return None
    plain = lrt_social(social, null)
    return plain.statistic, plain.p, lrt_social(social, null, boundary=True).p


def lrt_calibration(config, n_jobs=1):
    """
    Likelihood-ratio p-values on data simulated under ``config``.

    Each replicate simulates a dataset, fits ``config.spec`` and its asocial
    counterpart, and records ``(statistic, p, p_boundary)``; ``p`` uses the
    chi-square reference and ``p_boundary`` the 50:50 chi-bar-square mixture.
    Failed replicates are returned as ``None``.
    """
    if not isinstance(config.spec, NbdaModelSpec) or not config.spec.social:
        raise TypeError("LRT calibration needs a social NbdaModelSpec")
    children = np.random.SeedSequence(config.seed).spawn(config.replicates)
    return parallel_map(_lrt_replicate, [(config, c) for c in children], n_jobs)


DEFAULT_PANEL_THETA = {"edges": -4.0, "match_gender_M": 0.5, "absdiff_popularity": -0.02}


def synthetic_dataset(n_artists=60, n_diffusions=3, s=5.0, theta=None, start_year=1984,
                      n_years=20, missing_rate=0.1, seed=0):
    """
    Self-contained toy dataset in the ingest layout.

    Artists get random covariates; collaborations follow a formation panel
    driven by ``theta`` (raw covariate scale) with staggered entry years;
    each diffusion spreads over the accumulated collaboration network under
    an additive model with strength ``s``, acquisitions binned into years.
    A fraction ``missing_rate`` of popularity, followers and locations is
    blanked afterwards.
    """
    from .ingest import ArtistRecord, Dataset, SamplingEvent, ilv_table
    from .netcore import build_collab_network

    rng = _rng(seed)
    theta = dict(DEFAULT_PANEL_THETA if theta is None else theta)
    genders = rng.choice(["female", "male", "other", "missing"], size=n_artists, p=[0.15, 0.5, 0.1, 0.25])
    lat = rng.uniform(-60, 70, n_artists)
    lon = rng.uniform(-180, 180, n_artists)
    pop = np.round(rng.uniform(0, 100, n_artists))
    fol = np.round(np.exp(rng.normal(9, 2, n_artists)))
    full = [
        ArtistRecord(k, f"artist{k}", str(genders[k]), float(lat[k]), float(lon[k]), float(pop[k]), float(fol[k]))
        for k in range(n_artists)
    ]
    ilvs = ilv_table(full)
    entry = {k: int(start_year + rng.integers(0, max(1, n_years // 2))) for k in range(n_artists)}
    panel = simulate_formation_panel(theta, ilvs, n_years - 1, rng, start_year=start_year, entry_year=entry)
    collabs = [(i, j, snap.year) for snap in panel.snapshots for i, j in sorted(snap.edges)]
    net = build_collab_network([(i, j) for i, j, _ in collabs], nodes=range(n_artists))
    per_year = max(1, math.ceil(n_artists / n_years))
    events = []
    for d in range(n_diffusions):
        diff = simulate_diffusion(net, NbdaModelSpec("additive"), s, seed=rng, events_per_year=per_year,
                                  diffusion_id=f"break{d + 1}")
        for k, (_, group) in enumerate(diff.tie_groups):
            events.extend(SamplingEvent(diff.diffusion_id, a, start_year + k) for a in sorted(group))

    def blank(v):
        return math.nan if rng.random() < missing_rate else v

    artists = []
    for a in full:
        located = rng.random() >= missing_rate
        artists.append(ArtistRecord(
            a.id, a.name, a.gender_raw,
            a.latitude if located else math.nan, a.longitude if located else math.nan,
            blank(a.popularity), blank(a.followers),
        ))
    return Dataset(tuple(artists), tuple(collabs), tuple(events))
