"""
Command-line entry point.

Every subcommand reads its settings from flags and, optionally, a
``key = value`` config file (flags win). Each run writes ``manifest.json``
into the output directory with the resolved settings and SHA-256 digests of
the inputs.
"""

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FitError, ValidationError
from .formation import (
    FORMATION_TABLE_HEADER, GOF_HEADER, FormationTermSpec, build_dyad_table,
    enumerate_formation_models, fit_formation, formation_gof, formation_table_rows,
)
from .ingest import (
    CONTINUOUS_ILVS, ILV_NAMES, center_ilvs, ilv_table, impute_ilvs, load_dataset, write_dataset,
)
from .netcore import build_dynamic_network
from .oada import (
    OADA_TABLE_HEADER, VARIANTS, NbdaModelSpec, OadaData, build_diffusions,
    enumerate_oada_models, fit_oada, lrt_social, oada_table_rows,
)
from .parallel import default_workers
from .statutil import ols

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


@dataclass
class RunConfig:
    artists: str = ""
    collaborations: str = ""
    events: str = ""
    out: str = "breaknet-out"
    seed: int = None
    impute: bool = True
    # oada
    variants: list = field(default_factory=lambda: list(VARIANTS))
    ilvs: list = field(default_factory=lambda: list(ILV_NAMES))
    s_structure: str = "shared"
    lrt_boundary: bool = False
    # formation
    year_range: str = "1900-2100"
    periods: list = field(default_factory=list)
    transition_years: list = field(default_factory=list)
    groups: list = field(default_factory=lambda: list(ILV_NAMES))
    terms: list = field(default_factory=list)
    n_sims: int = 100
    structural: bool = True
    # simulation / recovery
    kind: str = "oada"
    n_artists: int = 60
    n_diffusions: int = 3
    n_nodes: int = 50
    n_years: int = 20
    n_transitions: int = 10
    density: float = 0.1
    s: float = 5.0
    theta: list = field(default_factory=list)
    replicates: int = 100
    missing_rate: float = 0.1

    def require_seed(self, what):
        if self.seed is None:
            raise ConfigError(f"seed: required for {what}")


_LIST_FIELDS = {f.name for f in fields(RunConfig) if f.type == "list" or f.type is list}
_BOOL_FIELDS = {"impute", "lrt_boundary", "structural"}
_INT_FIELDS = {"seed", "n_sims", "n_artists", "n_diffusions", "n_nodes", "n_years", "n_transitions", "replicates"}
_FLOAT_FIELDS = {"density", "s", "missing_rate"}


def _coerce(key, value):
    try:
        if key in _BOOL_FIELDS:
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if key in _INT_FIELDS:
            return int(value)
        if key in _FLOAT_FIELDS:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: invalid value {value!r}")
    if key in _LIST_FIELDS and isinstance(value, str):
        return [x.strip() for x in value.split(",") if x.strip()]
    return value


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment, list values are comma separated."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}, line {lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{key}: unknown config key ({path}, line {lineno})")
        out[key] = _coerce(key, value)
    return out


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        return _jsonable(v.item())
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cell(x):
    if isinstance(x, (bool, str)) or x is None:
        return "" if x is None else x
    if hasattr(x, "item"):
        x = x.item()
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return x


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _parse_range(text, name):
    try:
        a, b = (int(x) for x in str(text).split("-"))
    except ValueError:
        raise ConfigError(f"{name}: expected START-END, got {text!r}")
    if a > b:
        raise ConfigError(f"{name}: start after end in {text!r}")
    return a, b


def _parse_theta(items):
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"theta: expected term=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ConfigError(f"theta: invalid value in {item!r}")
    return out


class Run:
    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.partial_failures = []
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"out: cannot create output directory {cfg.out}: {exc}")

    def inputs(self):
        paths = [p for p in (self.cfg.artists, self.cfg.collaborations, self.cfg.events) if p]
        return {p: _sha256(p) for p in paths if Path(p).exists()}

    def manifest(self):
        cfg = {f.name: getattr(self.cfg, f.name) for f in fields(RunConfig)}
        write_json(self.out / "manifest.json", {
            "command": self.command,
            "version": __version__,
            "config": cfg,
            "seed": self.cfg.seed,
            "inputs": self.inputs(),
            "partial_failures": self.partial_failures,
        })

    def dataset(self):
        for name in ("artists", "collaborations", "events"):
            if not getattr(self.cfg, name):
                raise ConfigError(f"{name}: input path required")
        return load_dataset(self.cfg.artists, self.cfg.collaborations, self.cfg.events)

    def raw_ilvs(self, ds):
        return ilv_table(ds.artists)

    def imputed(self, ds):
        table = self.raw_ilvs(ds)
        if self.cfg.impute and table.has_missing:
            self.cfg.require_seed("imputation")
            table = impute_ilvs(table, self.cfg.seed)
        return table


def _ilv_rows(table):
    return [[v] + [float(table.column(c)[k]) for c in table.names] for k, v in enumerate(table.ids)]


def cmd_validate(run):
    ds = run.dataset()
    summary = ds.summary()
    write_json(run.out / "summary.json", summary)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_prepare(run):
    ds = run.dataset()
    raw = run.raw_ilvs(ds)
    filled = run.imputed(ds)
    if filled.has_missing:
        raise ValidationError("covariates still missing; enable imputation")
    prepared = center_ilvs(filled)
    header = ["artist_id"] + list(raw.names)
    write_csv(run.out / "ilvs_raw.csv", header, _ilv_rows(raw))
    write_csv(run.out / "ilvs_imputed.csv", header, _ilv_rows(filled))
    write_csv(run.out / "ilvs_prepared.csv", header, _ilv_rows(prepared))
    mask_rows = [[v] + [int(filled.imputed_mask.get(c, [False] * len(raw))[k]) for c in raw.names]
                 for k, v in enumerate(raw.ids)]
    write_csv(run.out / "imputed_mask.csv", header, mask_rows)
    print(f"prepared {len(raw)} artists; imputed cells: "
          + ", ".join(f"{c}={int(sum(m))}" for c, m in filled.imputed_mask.items()))
    return EXIT_OK


def _restrict(table, ids):
    from .ingest import IlvTable

    rows = table.index(ids)
    return IlvTable(tuple(ids), {c: table.column(c)[rows] for c in table.names}, table.centered,
                    {c: m[rows] for c, m in table.imputed_mask.items()})


def cmd_fit_oada(run):
    cfg = run.cfg
    ds = run.dataset()
    unknown = [c for c in cfg.ilvs if c not in ILV_NAMES]
    if unknown:
        raise ConfigError(f"ilvs: unknown variables {unknown}")
    bad = [v for v in cfg.variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"variants: unknown {bad}")
    diffusions = build_diffusions(ds)
    table = None
    if cfg.ilvs:
        filled = run.imputed(ds)
        pop = sorted(set().union(*(d.network.nodes for d in diffusions)))
        table = center_ilvs(_restrict(filled, pop))
    data = OadaData(diffusions, table)
    rows = enumerate_oada_models(data, cfg.ilvs, cfg.variants, cfg.s_structure, seed=cfg.seed or 0,
                                 n_jobs=default_workers())
    write_csv(run.out / "oada_models.csv", OADA_TABLE_HEADER, oada_table_rows(rows))
    failed = [r.spec.label for r in rows if r.failed]
    run.partial_failures.extend(failed)
    selected = next((r for r in rows if r.selected), None)
    if selected is None:
        raise FitError("no OADA model converged")
    detail = {"selected": selected.fit.to_dict(), "n_diffusions": len(diffusions), "n_events": data.n_events}
    fit = selected.fit
    if fit.spec.social:
        asocial = next((r.fit for r in rows if not r.failed and r.spec.variant == "asocial"
                        and set(r.spec.ilvs) == set(fit.spec.ilvs)), None)
        if asocial is None:
            asocial = fit_oada(NbdaModelSpec("asocial", fit.spec.ilvs), data, seed=cfg.seed or 0)
        lrt = lrt_social(fit, asocial, boundary=cfg.lrt_boundary)
        detail["lrt"] = {
            "statistic": lrt.statistic, "df": lrt.df, "p": lrt.p,
            "aicc_social": fit.aicc, "aicc_asocial": asocial.aicc,
            "delta_aicc": asocial.aicc - fit.aicc,
        }
        if cfg.s_structure == "per_diffusion" and len(diffusions) >= 3:
            years = {}
            for ev in ds.events:
                years.setdefault(ev.diffusion_id, {})
                prev = years[ev.diffusion_id].get(ev.artist, ev.year)
                years[ev.diffusion_id][ev.artist] = min(prev, ev.year)
            mean_y = [float(np.mean(list(years[d.diffusion_id].values()))) for d in diffusions]
            med_y = [float(np.median(list(years[d.diffusion_id].values()))) for d in diffusions]
            trend = {}
            for label, xs in (("mean_year", mean_y), ("median_year", med_y)):
                try:
                    r = ols(xs, list(fit.s_hat))
                    trend[label] = {"slope": r.slope, "intercept": r.intercept,
                                    "r_squared": r.r_squared, "p": r.p_value, "n": r.n}
                except ValueError as exc:
                    trend[label] = {"error": str(exc)}
            detail["transmission_trend"] = trend
    write_json(run.out / "oada_fit.json", detail)
    print(f"fitted {len(rows)} OADA models; selected {selected.spec.label} (AICc {fit.aicc:.2f})")
    if failed:
        print(f"{len(failed)} model(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _dynamic(ds, cfg):
    entry = {}
    for ev in ds.events:
        entry[ev.artist] = min(ev.year, entry.get(ev.artist, ev.year))
    return build_dynamic_network(ds.collaborations, _parse_range(cfg.year_range, "year_range"),
                                 nodes=[a.id for a in ds.artists], entry_year=entry)


def _periods(cfg, dynamic):
    first, last = dynamic.years[0], dynamic.years[-1]
    periods = [_parse_range(p, "periods") for p in cfg.periods]
    for y in cfg.transition_years:
        try:
            y = int(y)
        except ValueError:
            raise ConfigError(f"transition_years: not a year: {y!r}")
        if not first < y <= last:
            raise ConfigError(f"transition_years: {y} outside {first + 1}-{last}")
        periods += [(first, y - 1), (y, last)]
    if not periods:
        periods = [(first, last)]
    out = []
    for p in periods:
        if p not in out:
            out.append(p)
    return out


def cmd_fit_formation(run, gof=False):
    cfg = run.cfg
    ds = run.dataset()
    ilvs = run.imputed(ds)
    dynamic = _dynamic(ds, cfg)
    if gof:
        cfg.require_seed("goodness-of-fit simulation")
    unknown = [g for g in cfg.groups if g not in ILV_NAMES]
    if unknown:
        raise ConfigError(f"groups: unknown covariate groups {unknown}")
    status = EXIT_OK
    report = {"excluded_rows": dynamic.excluded.total, "years": [dynamic.years[0], dynamic.years[-1]],
              "periods": []}
    for start, end in _periods(cfg, dynamic):
        tag = f"{start}-{end}"
        if end - start < 1:
            run.partial_failures.append(f"period {tag}: fewer than two years")
            status = EXIT_NUMERIC
            continue
        table = build_dyad_table(dynamic, ilvs, (start, end))
        if cfg.terms:
            spec = FormationTermSpec(tuple(cfg.terms))
            fit = fit_formation(table, spec)
        else:
            rows = enumerate_formation_models(table, cfg.groups, n_jobs=default_workers())
            if not gof:
                write_csv(run.out / f"formation_models_{tag}.csv", FORMATION_TABLE_HEADER,
                          formation_table_rows(rows))
            failed = [r.terms.label for r in rows if r.failed]
            if failed:
                run.partial_failures.extend(f"{tag}: {lbl}" for lbl in failed)
                status = EXIT_NUMERIC
            sel = next((r for r in rows if r.selected), None)
            if sel is None:
                raise FitError(f"no formation model converged for {tag}")
            fit = sel.fit
        if gof:
            grows = formation_gof(fit, dynamic, ilvs, n_sims=cfg.n_sims, seed=cfg.seed,
                                  structural=cfg.structural)
            write_csv(run.out / f"gof_{tag}.csv", GOF_HEADER,
                      [[g.statistic, g.observed, g.sim_mean, g.sim_lo95, g.sim_hi95, g.p] for g in grows])
        else:
            write_json(run.out / f"formation_fit_{tag}.json", fit.to_dict())
        report["periods"].append({"period": tag, "terms": list(fit.terms.terms), "aic": fit.aic})
        print(f"{tag}: {fit.terms.label} (AIC {fit.aic:.2f})")
    write_json(run.out / ("gof_summary.json" if gof else "formation_summary.json"), report)
    return status


def cmd_gof(run):
    return cmd_fit_formation(run, gof=True)


def cmd_simulate(run):
    from .simkit import synthetic_dataset

    cfg = run.cfg
    cfg.require_seed("simulation")
    theta = _parse_theta(cfg.theta) or None
    ds = synthetic_dataset(cfg.n_artists, cfg.n_diffusions, cfg.s, theta, n_years=cfg.n_years,
                           missing_rate=cfg.missing_rate, seed=cfg.seed)
    write_dataset(ds, run.out)
    print(" ".join(f"{k}={v}" for k, v in ds.summary().items()))
    return EXIT_OK


def cmd_recover(run):
    from .simkit import RecoveryReport, SimConfig, recovery_experiment

    cfg = run.cfg
    cfg.require_seed("recovery simulation")
    if cfg.kind == "oada":
        spec = NbdaModelSpec("additive")
        truth = {"s": cfg.s}
    elif cfg.kind == "formation":
        truth = _parse_theta(cfg.theta) or {"edges": -3.0, "match_gender_M": 1.0, "absdiff_popularity": -0.05}
        spec = FormationTermSpec(tuple(truth))
    else:
        raise ConfigError(f"kind: expected oada or formation, got {cfg.kind!r}")
    sim = SimConfig(spec, truth, replicates=cfg.replicates, seed=cfg.seed, n_nodes=cfg.n_nodes,
                    density=cfg.density, n_diffusions=cfg.n_diffusions, n_transitions=cfg.n_transitions,
                    ilv_scale={"popularity": 20.0} if cfg.kind == "formation" else {})
    report = recovery_experiment(sim, n_jobs=default_workers())
    write_csv(run.out / "recovery.csv", RecoveryReport.HEADER, report.rows())
    write_json(run.out / "recovery_summary.json", {"failures": report.failures, "params": report.summary()})
    for name, s in report.summary().items():
        print(f"{name}: mean {s.get('mean_estimate', math.nan):.4g}, coverage {s.get('coverage', math.nan):.2f}")
    return EXIT_NUMERIC if report.failures else EXIT_OK


COMMANDS = {
    "validate": (cmd_validate, "check input files and print counts"),
    "prepare": (cmd_prepare, "compute covariates, impute missing values and center"),
    "fit-oada": (cmd_fit_oada, "rank OADA models and report the selected fit with an LRT"),
    "fit-formation": (cmd_fit_formation, "rank formation models per period"),
    "gof": (cmd_gof, "simulation goodness of fit for the selected formation model"),
    "simulate": (cmd_simulate, "write a synthetic dataset with known parameters"),
    "recover": (cmd_recover, "parameter-recovery experiment"),
}


def _toy_paths():
    base = resources.files("breaknet") / "data" / "toy"
    return {n: str(base / f"{n}.csv") for n in ("artists", "collaborations", "events")}


def build_parser():
    parser = argparse.ArgumentParser(prog="breaknet", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--artists")
        p.add_argument("--collaborations")
        p.add_argument("--events")
        p.add_argument("--toy", action="store_true", help="use the bundled three-artist dataset")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--no-impute", dest="impute", action="store_const", const=False)
        if name == "fit-oada":
            p.add_argument("--variant", dest="variants", action="append", choices=VARIANTS)
            p.add_argument("--ilv", dest="ilvs", action="append", choices=ILV_NAMES)
            p.add_argument("--no-ilvs", action="store_true", help="fit without individual-level variables")
            p.add_argument("--s-structure", choices=("shared", "per_diffusion"))
            p.add_argument("--lrt-boundary", action="store_const", const=True,
                           help="refer the LRT to the chi-bar-square boundary law")
        if name in ("fit-formation", "gof"):
            p.add_argument("--year-range", help="START-END window for collaboration years")
            p.add_argument("--period", dest="periods", action="append", help="START-END (repeatable)")
            p.add_argument("--transition-year", dest="transition_years", action="append",
                           help="split year; yields two periods (repeatable)")
            p.add_argument("--group", dest="groups", action="append", choices=ILV_NAMES)
            p.add_argument("--term", dest="terms", action="append", help="fit this term set instead of ranking")
        if name == "gof":
            p.add_argument("--n-sims", type=int)
            p.add_argument("--no-structural", dest="structural", action="store_const", const=False)
        if name in ("simulate", "recover"):
            p.add_argument("--s", type=float, help="true transmission strength")
            p.add_argument("--theta", action="append", help="term=value formation coefficient (repeatable)")
            p.add_argument("--n-diffusions", type=int)
        if name == "simulate":
            p.add_argument("--n-artists", type=int)
            p.add_argument("--n-years", type=int)
            p.add_argument("--missing-rate", type=float)
        if name == "recover":
            p.add_argument("--kind", choices=("oada", "formation"))
            p.add_argument("--replicates", type=int)
            p.add_argument("--n-nodes", type=int)
            p.add_argument("--n-transitions", type=int)
            p.add_argument("--density", type=float)
    return parser


def resolve_config(args):
    cfg = RunConfig()
    values = read_config_file(args.config) if args.config else {}
    if getattr(args, "toy", False):
        values.update(_toy_paths())
    known = {f.name for f in fields(RunConfig)}
    for key, value in vars(args).items():
        if key in known and value is not None:
            values[key] = value
    if getattr(args, "no_ilvs", False):
        values["ilvs"] = []
    for key, value in values.items():
        setattr(cfg, key, value)
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    fn = COMMANDS[args.command][0]
    run = None
    try:
        cfg = resolve_config(args)
        run = Run(args.command, cfg)
        status = fn(run)
        return status
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if run is not None:
            run.manifest()


if __name__ == "__main__":
    sys.exit(main())
