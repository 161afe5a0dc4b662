"""
Order-of-acquisition diffusion analysis (OADA).

The likelihood treats each acquisition as a draw from the artists who are
still naive, with probability proportional to their relative rate

    asocial:         R_i = exp(beta . x_i)
    additive:        R_i = s * T_i + exp(beta . x_i)
    multiplicative:  R_i = exp(beta . x_i) * (s * T_i + 1)

where T_i is the collaboration weight linking i to already informed artists.
The baseline acquisition rate is common to all naive artists and cancels.
"""

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import FitError, ValidationError
from .netcore import CollabNetwork, build_collab_network
from .parallel import parallel_map
from .statutil import aicc as _aicc
from .statutil import chi_sq_upper_tail, normal_upper_tail

VARIANTS = ("asocial", "additive", "multiplicative")
S_STRUCTURES = ("shared", "per_diffusion")
OADA_ILVS = ("gender", "popularity", "followers", "mean_distance")

_U_BOUNDS = (-25.0, 25.0)


@dataclass(frozen=True)
class NbdaModelSpec:
    variant: str
    ilvs: tuple = ()
    s_structure: str = "shared"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.s_structure not in S_STRUCTURES:
            raise ValueError(f"unknown s_structure {self.s_structure!r}")
        ilvs = tuple(self.ilvs)
        if len(set(ilvs)) != len(ilvs):
            raise ValueError(f"duplicate ILVs in {ilvs}")
        object.__setattr__(self, "ilvs", ilvs)

    @property
    def social(self):
        return self.variant != "asocial"

    def n_s(self, n_diffusions):
        if not self.social:
            return 0
        if self.s_structure == "per_diffusion":
            if n_diffusions < 2:
                raise ValueError("per-diffusion transmission needs at least two diffusions")
            return n_diffusions
        return 1

    @property
    def label(self):
        return f"{self.variant}[{'+'.join(self.ilvs)}]/{self.s_structure}"


@dataclass(frozen=True)
class Diffusion:
    """
    One trait spreading through a population.

    ``tie_groups`` is a sequence of ``(order_index, frozenset_of_artists)``;
    artists sharing a group acquired the trait at the same order position
    (the same year). The population at risk is ``network.nodes``.
    """

    diffusion_id: str
    tie_groups: tuple
    network: CollabNetwork

    def __post_init__(self):
        groups = tuple((int(o), frozenset(int(a) for a in g)) for o, g in self.tie_groups)
        if not groups:
            raise ValidationError(f"diffusion {self.diffusion_id!r} has no acquisition events")
        seen = set()
        for (o1, _), (o2, _) in zip(groups, groups[1:]):
            if o2 <= o1:
                raise ValidationError(f"diffusion {self.diffusion_id!r}: order indices not increasing")
        for o, g in groups:
            if not g:
                raise ValidationError(f"diffusion {self.diffusion_id!r}: empty tie group {o}")
            if seen & g:
                raise ValidationError(
                    f"diffusion {self.diffusion_id!r}: artist(s) {sorted(seen & g)} acquire twice"
                )
            missing = g - self.network.nodes
            if missing:
                raise ValidationError(
                    f"diffusion {self.diffusion_id!r}: artists {sorted(missing)} not in network"
                )
            seen |= g
        object.__setattr__(self, "tie_groups", groups)

    @classmethod
    def from_order(cls, diffusion_id, order, network):
        """Untied diffusion: each artist in ``order`` gets its own group."""
        return cls(diffusion_id, tuple((k, frozenset([a])) for k, a in enumerate(order)), network)

    @classmethod
    def from_years(cls, diffusion_id, first_year, network):
        """Group artists by acquisition year (``{artist: year}``)."""
        by_year = {}
        for a, y in first_year.items():
            by_year.setdefault(int(y), set()).add(int(a))
        return cls(diffusion_id, tuple((y, frozenset(by_year[y])) for y in sorted(by_year)), network)

    @property
    def acquirers(self):
        return [a for _, g in self.tie_groups for a in sorted(g)]

    @property
    def n_events(self):
        return sum(len(g) for _, g in self.tie_groups)


@dataclass(frozen=True)
class OadaData:
    diffusions: tuple
    ilvs: object = None  # IlvTable or None

    def __post_init__(self):
        object.__setattr__(self, "diffusions", tuple(self.diffusions))
        if not self.diffusions:
            raise ValidationError("OADA needs at least one diffusion")
        ids = [d.diffusion_id for d in self.diffusions]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate diffusion ids")

    @property
    def n_events(self):
        return sum(d.n_events for d in self.diffusions)

    @property
    def population(self):
        return sorted(set().union(*(d.network.nodes for d in self.diffusions)))


def build_diffusions(dataset, diffusion_ids=None):
    """
    Turn sampling events into diffusions.

    Each artist's acquisition year is the first year they used the source.
    The population of a diffusion is the set of artists who sampled it; its
    network holds the collaborations among them.
    """
    first = {}
    for ev in dataset.events:
        d = first.setdefault(ev.diffusion_id, {})
        d[ev.artist] = min(ev.year, d.get(ev.artist, ev.year))
    keys = sorted(first) if diffusion_ids is None else list(diffusion_ids)
    pairs = [(a, b) for a, b, _ in dataset.collaborations]
    out = []
    for key in keys:
        if key not in first:
            raise ValidationError(f"no events for diffusion {key!r}")
        members = set(first[key])
        net = build_collab_network(
            [(a, b) for a, b in pairs if a in members and b in members], nodes=members
        )
        out.append(Diffusion.from_years(key, first[key], net))
    return out


def _rates(variant, s, T, base):
    if variant == "asocial":
        return base
    if variant == "additive":
        return s * T + base
    return base * (s * T + 1.0)


def rate_vector(spec, s, beta, network, ilvs, informed_set, naive=None):
    """
    Relative acquisition rate of each naive artist.

    Parameters
    ----------
    spec : NbdaModelSpec
    s : float
        Social transmission strength (ignored for asocial models).
    beta : sequence of float
        One coefficient per ILV in ``spec.ilvs``.
    network : CollabNetwork
    ilvs : IlvTable or None
    informed_set : iterable of artist ids
    naive : iterable of artist ids, optional
        Defaults to every node outside ``informed_set``.

    Returns
    -------
    dict
        ``{artist: R}``.
    """
    beta = np.asarray(beta if beta is not None else [], dtype=float).reshape(-1)
    if beta.shape != (len(spec.ilvs),):
        raise ValueError(f"expected {len(spec.ilvs)} ILV coefficients, got {beta.size}")
    if spec.social and s < 0:
        raise ValueError("social transmission strength must be non-negative")
    informed = set(informed_set)
    if not informed <= network.nodes:
        raise ValueError("informed set contains artists outside the network")
    naive = sorted(network.nodes - informed if naive is None else set(naive))
    out = {}
    for i in naive:
        T = sum(w for j, w in network.neighbors(i).items() if j in informed)
        eta = sum(b * ilvs.value(i, name) for b, name in zip(beta, spec.ilvs)) if len(beta) else 0.0
        out[i] = float(_rates(spec.variant, s, T, math.exp(eta)))
    return out


class _Compiled:
    """
    Flattened event table for fast likelihood evaluation.

    One row per (tie group, naive artist). Within a group the acquirers leave
    the risk set one at a time in ascending id order, so the denominator for
    the m-th acquirer is the sum of rates of non-acquirers in the group plus
    the rates of acquirers m, m+1, ....
    """

    def __init__(self, data, ilv_names):
        T_parts, X_parts, grp_parts, dif_parts, acq_parts = [], [], [], [], []
        acq_rows, acq_groups = [], []
        g_off = row_off = 0
        for d_idx, diff in enumerate(data.diffusions):
            nodes = sorted(diff.network.nodes)
            index = {v: k for k, v in enumerate(nodes)}
            W = diff.network.weight_matrix(nodes)
            X = data.ilvs.matrix(ilv_names, nodes) if ilv_names else np.zeros((len(nodes), 0))
            if np.isnan(X).any():
                raise ValidationError("ILV table has missing values; impute before fitting")
            informed = np.zeros(len(nodes), dtype=bool)
            T_all = np.zeros(len(nodes))
            for _, group in diff.tie_groups:
                acq = np.array([index[a] for a in sorted(group)])
                naive = np.flatnonzero(~informed)
                is_acq = np.zeros(len(nodes), dtype=bool)
                is_acq[acq] = True
                # non-acquirers first, then acquirers in ascending id
                rows = np.concatenate([naive[~is_acq[naive]], acq])
                T_parts.append(T_all[rows])
                X_parts.append(X[rows])
                grp_parts.append(np.full(rows.size, g_off))
                dif_parts.append(np.full(rows.size, d_idx))
                flags = np.zeros(rows.size, dtype=bool)
                flags[rows.size - acq.size:] = True
                acq_parts.append(flags)
                acq_rows.extend(range(row_off + rows.size - acq.size, row_off + rows.size))
                acq_groups.extend([g_off] * acq.size)
                row_off += rows.size
                g_off += 1
                informed[acq] = True
                T_all += W[:, acq].sum(axis=1)
        self.T = np.concatenate(T_parts)
        self.X = np.concatenate(X_parts)
        self.group = np.concatenate(grp_parts)
        self.diff = np.concatenate(dif_parts)
        self.is_acq = np.concatenate(acq_parts)
        self.acq_rows = np.asarray(acq_rows)
        self.acq_groups = np.asarray(acq_groups)
        self.n_groups = g_off
        # start of each group's acquirer block inside acq_rows
        starts = np.flatnonzero(np.r_[True, self.acq_groups[1:] != self.acq_groups[:-1]])
        self.acq_group_start = np.repeat(starts, np.diff(np.r_[starts, self.acq_rows.size]))
        self.acq_group_end = np.repeat(np.r_[starts[1:], self.acq_rows.size], np.diff(np.r_[starts, self.acq_rows.size]))
        self.n_events = self.acq_rows.size

    def loglik(self, variant, s_vec, beta):
        base = np.exp(self.X @ beta) if beta.size else np.ones(self.T.size)
        s_row = s_vec[self.diff] if variant != "asocial" else 0.0
        R = _rates(variant, s_row, self.T, base)
        if np.any(R <= 0) or not np.all(np.isfinite(R)):
            return -math.inf
        nonacq = np.bincount(self.group, weights=np.where(self.is_acq, 0.0, R), minlength=self.n_groups)
        R_acq = R[self.acq_rows]
        csum = np.r_[0.0, np.cumsum(R_acq)]
        # suffix sum of acquirer rates within the group, from this acquirer on
        suffix = csum[self.acq_group_end] - csum[np.arange(R_acq.size)]
        single = (self.acq_group_end - self.acq_group_start) == 1
        suffix = np.where(single, R_acq, suffix)
        denom = nonacq[self.acq_groups] + suffix
        return float(np.sum(np.log(R_acq)) - np.sum(np.log(denom)))


def _beta_vector(spec, beta):
    if isinstance(beta, dict):
        return np.array([beta[n] for n in spec.ilvs], dtype=float)
    beta = np.asarray(beta if beta is not None else [], dtype=float).reshape(-1)
    if beta.size != len(spec.ilvs):
        raise ValueError(f"expected {len(spec.ilvs)} ILV coefficients, got {beta.size}")
    return beta


def oada_log_likelihood(spec, s, beta, data):
    """
    Order-of-acquisition log-likelihood summed over every diffusion.

    ``s`` is a scalar (shared) or one value per diffusion.
    """
    if not isinstance(data, OadaData):
        raise TypeError("data must be OadaData")
    s_vec = np.broadcast_to(np.asarray(s if spec.social else 0.0, dtype=float), (len(data.diffusions),))
    if spec.social and np.any(s_vec < 0):
        raise ValueError("social transmission strength must be non-negative")
    return _Compiled(data, spec.ilvs).loglik(spec.variant, s_vec, _beta_vector(spec, beta))


@dataclass
class NbdaFit:
    spec: NbdaModelSpec
    s_hat: tuple
    beta_hat: dict
    log_likelihood: float
    k: int
    n: int
    aicc: float
    se: dict = field(default_factory=dict)
    z: dict = field(default_factory=dict)
    p: dict = field(default_factory=dict)
    effect_sizes: dict = field(default_factory=dict)
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)
    s_names: tuple = ()

    @property
    def estimates(self):
        out = dict(zip(self.s_names, self.s_hat))
        out.update(self.beta_hat)
        return out

    def wald_interval(self, name, level=0.95):
        from scipy.stats import norm

        est, se = self.estimates[name], self.se.get(name, math.nan)
        half = norm.ppf(0.5 + level / 2) * se
        return est - half, est + half

    def to_dict(self):
        def num(v):
            return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v

        return {
            "variant": self.spec.variant,
            "ilvs": list(self.spec.ilvs),
            "s_structure": self.spec.s_structure,
            "log_likelihood": self.log_likelihood,
            "k": self.k,
            "n": self.n,
            "aicc": self.aicc,
            "converged": self.converged,
            "parameters": [
                {
                    "name": name,
                    "estimate": est,
                    "se": num(self.se.get(name)),
                    "z": num(self.z.get(name)),
                    "p": num(self.p.get(name)),
                    "effect_size": num(self.effect_sizes.get(name)),
                }
                for name, est in self.estimates.items()
            ],
            "diagnostics": {k: num(v) for k, v in self.diagnostics.items()},
        }


def _ilv_scale(ilvs, name):
    col = ilvs.column(name)
    sd = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
    return sd if sd > 0 else 1.0


def nbda_effect_sizes(fit, ilvs):
    """
    Multiplicative change in the rate across a typical covariate contrast:
    exp(beta * 2) for gender (coding runs -1 to +1), exp(beta * sample SD)
    for continuous covariates.
    """
    out = {}
    for name, b in fit.beta_hat.items():
        delta = 2.0 if name == "gender" else float(np.std(ilvs.column(name), ddof=1))
        out[name] = math.exp(b * delta)
    return out


def _hessian(f, x, rel_step=1e-5):
    """Central finite-difference Hessian with steps rel_step * max(|x_i|, 1)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = rel_step * np.maximum(np.abs(x), 1.0)
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def fit_oada(spec, data, seed=0, restarts=5, max_evals=5000, rtol=1e-8):
    """
    Maximum-likelihood fit of one OADA model.

    Transmission strengths are optimised as log(s) so they stay positive;
    ILV coefficients are optimised on a per-SD scale and reported on the raw
    scale. Nelder-Mead is started from s=1, beta=0 and then from
    ``restarts - 1`` jittered points; the best run is kept. Standard errors
    come from a finite-difference observed information matrix evaluated in
    (s, beta).
    """
    if spec.ilvs and data.ilvs is None:
        raise ValidationError("model uses ILVs but data carries no ILV table")
    n_s = spec.n_s(len(data.diffusions))
    n_b = len(spec.ilvs)
    k = n_s + n_b
    n = data.n_events
    comp = _Compiled(data, spec.ilvs)
    scale = np.array([_ilv_scale(data.ilvs, name) for name in spec.ilvs])
    if n_s == 1:
        s_names = ("s",)
    else:
        s_names = tuple(f"s[{d.diffusion_id}]" for d in data.diffusions)[:n_s]
    n_diff = len(data.diffusions)

    def loglik_natural(theta):
        s = theta[:n_s]
        s_vec = np.broadcast_to(s, (n_diff,)) if n_s else np.zeros(n_diff)
        return comp.loglik(spec.variant, np.asarray(s_vec, dtype=float), theta[n_s:] / scale)

    def objective(phi):
        theta = np.concatenate([np.exp(phi[:n_s]), phi[n_s:]])
        ll = loglik_natural(theta)
        return -ll if math.isfinite(ll) else 1e300

    if k == 0:
        ll = loglik_natural(np.zeros(0))
        return NbdaFit(spec, (), {}, ll, 0, n, _aicc(ll, 0, n), converged=True,
                       diagnostics={"evaluations": 1, "restarts": 0})

    rng = np.random.default_rng(seed)
    start = np.zeros(k)
    bounds = [_U_BOUNDS] * n_s + [(None, None)] * n_b
    best, runs, total_evals = None, [], 0
    for r in range(restarts):
        x0 = start if r == 0 else start + rng.normal(0.0, 1.0, k)
        x0[:n_s] = np.clip(x0[:n_s], *_U_BOUNDS)
        f0 = objective(x0)
        fatol = rtol * max(1.0, abs(f0)) if f0 < 1e300 else rtol
        res = minimize(
            objective, x0, method="Nelder-Mead", bounds=bounds,
            options={"maxfev": max_evals, "xatol": 1e-8, "fatol": fatol, "adaptive": k > 3},
        )
        total_evals += res.nfev
        runs.append(-res.fun)
        if best is None or res.fun < best.fun:
            best = res

    # the asocial limit sits on the s lower bound; make sure it is not missed
    edge = best.x.copy()
    edge[:n_s] = _U_BOUNDS[0]
    if n_s and objective(edge) < best.fun:
        res = minimize(
            objective, edge, method="Nelder-Mead", bounds=bounds,
            options={"maxfev": max_evals, "xatol": 1e-8, "fatol": rtol * max(1.0, abs(best.fun)),
                     "adaptive": k > 3},
        )
        total_evals += res.nfev
        if res.fun <= objective(edge):
            best = res
        else:
            best.x, best.fun = edge, objective(edge)

    theta_hat = np.concatenate([np.exp(best.x[:n_s]), best.x[n_s:]])
    ll = float(-best.fun)
    converged = bool(best.success) and math.isfinite(ll) and best.fun < 1e300

    se_nat = np.full(k, math.nan)
    info_ok = False
    if converged:
        H = -_hessian(loglik_natural, theta_hat)
        if np.all(np.isfinite(H)):
            try:
                cov = np.linalg.inv(H)
                d = np.diag(cov)
                if np.all(d > 0) and np.all(np.linalg.eigvalsh((H + H.T) / 2) > 0):
                    se_nat = np.sqrt(d)
                    info_ok = True
            except np.linalg.LinAlgError:
                pass

    s_hat = tuple(float(v) for v in theta_hat[:n_s])
    beta_raw = theta_hat[n_s:] / scale
    beta_hat = {name: float(b) for name, b in zip(spec.ilvs, beta_raw)}
    se_all = np.concatenate([se_nat[:n_s], se_nat[n_s:] / scale])
    names = s_names + tuple(spec.ilvs)
    est_all = np.concatenate([theta_hat[:n_s], beta_raw])
    se, z, p = {}, {}, {}
    for name, est, sd in zip(names, est_all, se_all):
        se[name] = float(sd)
        if info_ok:
            z[name] = float(est / sd)
            p[name] = 2.0 * normal_upper_tail(abs(est / sd))
        else:
            z[name] = p[name] = math.nan
    fit = NbdaFit(
        spec=spec, s_hat=s_hat, beta_hat=beta_hat, log_likelihood=ll, k=k, n=n,
        aicc=_aicc(ll, k, n), se=se, z=z, p=p, converged=converged, s_names=s_names,
        diagnostics={
            "evaluations": total_evals,
            "restarts": restarts,
            "restart_spread": float(max(runs) - min(runs)),
            "message": best.message,
            "information_ok": info_ok,
        },
    )
    if n_b:
        fit.effect_sizes = nbda_effect_sizes(fit, data.ilvs)
    return fit


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p: float


def lrt_social(fit_social, fit_asocial, boundary=False):
    """
    Likelihood-ratio test of social transmission against the asocial model.

    The statistic is clamped at zero. ``boundary=True`` refers it to the
    50:50 mixture of chi-square(0) and chi-square(df), the null law when a
    single transmission strength sits on its lower bound of zero.
    """
    if fit_asocial.spec.variant != "asocial" or fit_social.spec.variant == "asocial":
        raise ValueError("lrt_social needs a social fit and an asocial fit")
    if set(fit_social.spec.ilvs) != set(fit_asocial.spec.ilvs) or fit_social.n != fit_asocial.n:
        raise ValueError("asocial model is not nested in the social model")
    df = len(fit_social.s_hat)
    stat = 2.0 * (fit_social.log_likelihood - fit_asocial.log_likelihood)
    if stat < -1e-6:
        warnings.warn(
            f"social log-likelihood below asocial (LR={stat:.3g}); clamping to 0",
            RuntimeWarning, stacklevel=2,
        )
    stat = max(stat, 0.0)
    p = chi_sq_upper_tail(stat, df)
    if boundary and df == 1 and stat > 0:
        p = 0.5 * p
    return LrtResult(stat, df, p)


@dataclass
class ModelRow:
    spec: NbdaModelSpec
    fit: object = None
    error: str = ""
    delta_aicc: float = math.nan
    best_set: bool = False
    selected: bool = False

    @property
    def failed(self):
        return self.fit is None or not self.fit.converged


def _fit_row(args):
    spec, data, seed = args
    try:
        return ModelRow(spec, fit_oada(spec, data, seed=seed))
    except (FitError, ValueError, np.linalg.LinAlgError) as exc:
        return ModelRow(spec, error=str(exc))


def _subsets(items):
    return [c for r in range(len(items) + 1) for c in itertools.combinations(items, r)]


def enumerate_oada_models(data, candidate_ilvs, variants=VARIANTS, s_structure="shared",
                          seed=0, n_jobs=1):
    """
    Fit every variant with every subset of ``candidate_ilvs``.

    Returns ``ModelRow`` objects, successful fits ranked by AICc first and
    failures after them. ``best_set`` marks rows with dAICc < 2; ``selected``
    marks the best-set member with the most ILVs (lowest AICc on ties).
    """
    specs = [NbdaModelSpec(v, sub, s_structure) for sub in _subsets(tuple(candidate_ilvs)) for v in variants]
    if not specs:
        raise ValueError("no candidate models")
    rows = parallel_map(_fit_row, [(s, data, seed) for s in specs], n_jobs)
    ok = sorted((r for r in rows if not r.failed), key=lambda r: r.fit.aicc)
    bad = [r for r in rows if r.failed]
    if ok:
        best = ok[0].fit.aicc
        for r in ok:
            r.delta_aicc = r.fit.aicc - best
            r.best_set = r.delta_aicc < 2
        pick = max((r for r in ok if r.best_set), key=lambda r: (len(r.spec.ilvs), -r.fit.aicc))
        pick.selected = True
    return ok + bad


OADA_TABLE_HEADER = ["variant", "ilvs", "s_structure", "k", "loglik", "aicc", "delta_aicc", "converged"]


def oada_table_rows(rows):
    out = []
    for r in rows:
        f = r.fit
        out.append([
            r.spec.variant, "+".join(r.spec.ilvs), r.spec.s_structure,
            "" if f is None else f.k,
            "" if f is None else float(f.log_likelihood),
            "" if f is None else float(f.aicc),
            "" if r.failed else float(r.delta_aicc),
            "false" if r.failed else "true",
        ])
    return out
