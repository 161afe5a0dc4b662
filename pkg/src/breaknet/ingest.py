"""
Loading and preparation of artist covariates, collaborations and sampling
events.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .impute import rf_impute
from .statutil import haversine

GENDERS = ("female", "male", "other")
ARTIST_HEADER = ["artist_id", "name", "gender", "latitude", "longitude", "popularity", "followers"]
COLLAB_HEADER = ["artist_a", "artist_b", "year"]
EVENT_HEADER = ["diffusion_id", "artist_id", "year"]

ILV_NAMES = ("gender", "popularity", "followers", "mean_distance")
CONTINUOUS_ILVS = ("popularity", "followers", "mean_distance")


@dataclass(frozen=True)
class ArtistRecord:
    id: int
    name: str = ""
    gender_raw: str = "missing"
    latitude: float = math.nan
    longitude: float = math.nan
    popularity: float = math.nan
    followers: float = math.nan

    @property
    def located(self):
        return not (math.isnan(self.latitude) or math.isnan(self.longitude))


@dataclass(frozen=True)
class SamplingEvent:
    diffusion_id: str
    artist: int
    year: int


@dataclass(frozen=True)
class Dataset:
    artists: tuple
    collaborations: tuple  # (artist_a, artist_b, year)
    events: tuple

    @property
    def counts(self):
        return len(self.artists), len(self.collaborations), len(self.events)

    @property
    def artist_ids(self):
        return [a.id for a in self.artists]

    def summary(self):
        n_art, n_col, n_ev = self.counts
        return {
            "artists": n_art,
            "collaborations": n_col,
            "events": n_ev,
            "diffusions": len({e.diffusion_id for e in self.events}),
        }


def encode_gender(gender_raw):
    """Code female as -1, male as +1, anything else (including missing) as 0."""
    if gender_raw is None:
        return 0
    g = str(gender_raw).strip().lower()
    if g == "female":
        return -1
    if g == "male":
        return 1
    return 0


def _read_rows(path, header):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            found = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file, expected header {','.join(header)}")
        found = [h.strip() for h in found]
        if found != header:
            raise ValidationError(
                f"{path}: header {','.join(found)!r} does not match {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}, row {lineno}: expected {len(header)} fields")
            yield lineno, [c.strip() for c in row]


def _opt_float(text, path, lineno, name, lo=None, hi=None):
    if text == "":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"{path}, row {lineno}: {name} is not a number: {text!r}")
    if math.isnan(v) or (lo is not None and v < lo) or (hi is not None and v > hi):
        raise ValidationError(f"{path}, row {lineno}: {name} out of range: {text}")
    return v


def _int(text, path, lineno, name):
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"{path}, row {lineno}: {name} is not an integer: {text!r}")


def read_artists(path):
    out, seen = [], set()
    for lineno, row in _read_rows(path, ARTIST_HEADER):
        aid = _int(row[0], path, lineno, "artist_id")
        if aid < 0:
            raise ValidationError(f"{path}, row {lineno}: negative artist_id {aid}")
        if aid in seen:
            raise ValidationError(f"{path}, row {lineno}: duplicate artist_id {aid}")
        seen.add(aid)
        gender = row[2].lower()
        if gender not in GENDERS + ("",):
            raise ValidationError(f"{path}, row {lineno}: unknown gender {row[2]!r}")
        lat = _opt_float(row[3], path, lineno, "latitude", -90, 90)
        lon = _opt_float(row[4], path, lineno, "longitude", -180, 180)
        if math.isnan(lat) != math.isnan(lon):
            raise ValidationError(f"{path}, row {lineno}: latitude and longitude must both be set")
        out.append(
            ArtistRecord(
                id=aid,
                name=row[1],
                gender_raw=gender or "missing",
                latitude=lat,
                longitude=lon,
                popularity=_opt_float(row[5], path, lineno, "popularity", 0, 100),
                followers=_opt_float(row[6], path, lineno, "followers", 0),
            )
        )
    return out


def _check_year(year, path, lineno):
    if not 1900 <= year <= 2100:
        raise ValidationError(f"{path}, row {lineno}: implausible year {year}")


def read_collaborations(path, known_ids=None):
    out = []
    for lineno, row in _read_rows(path, COLLAB_HEADER):
        a = _int(row[0], path, lineno, "artist_a")
        b = _int(row[1], path, lineno, "artist_b")
        year = _int(row[2], path, lineno, "year")
        _check_year(year, path, lineno)
        if a == b:
            raise ValidationError(f"{path}, row {lineno}: self-collaboration of artist {a}")
        if known_ids is not None:
            for v in (a, b):
                if v not in known_ids:
                    raise ValidationError(f"{path}, row {lineno}: unknown artist_id {v}")
        out.append((a, b, year))
    return out


def read_events(path, known_ids=None):
    out = []
    for lineno, row in _read_rows(path, EVENT_HEADER):
        if not row[0]:
            raise ValidationError(f"{path}, row {lineno}: empty diffusion_id")
        aid = _int(row[1], path, lineno, "artist_id")
        year = _int(row[2], path, lineno, "year")
        _check_year(year, path, lineno)
        if known_ids is not None and aid not in known_ids:
            raise ValidationError(f"{path}, row {lineno}: unknown artist_id {aid}")
        out.append(SamplingEvent(row[0], aid, year))
    return out


def load_dataset(artists_path, collaborations_path, events_path):
    """Read and cross-validate the three input tables."""
    artists = read_artists(artists_path)
    ids = {a.id for a in artists}
    collabs = read_collaborations(collaborations_path, ids)
    events = read_events(events_path, ids)
    return Dataset(tuple(artists), tuple(collabs), tuple(events))


def write_dataset(dataset, directory):
    """Write a dataset in the three-file CSV layout read by ``load_dataset``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def fmt(v):
        return "" if isinstance(v, float) and math.isnan(v) else repr(v) if isinstance(v, float) else str(v)

    with open(directory / "artists.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ARTIST_HEADER)
        for a in dataset.artists:
            g = "" if a.gender_raw == "missing" else a.gender_raw
            w.writerow([a.id, a.name, g] + [fmt(v) for v in (a.latitude, a.longitude, a.popularity, a.followers)])
    with open(directory / "collaborations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLLAB_HEADER)
        w.writerows(dataset.collaborations)
    with open(directory / "events.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        w.writerows((e.diffusion_id, e.artist, e.year) for e in dataset.events)


def mean_geographic_distance(artists):
    """
    Mean haversine distance (km) from each located artist to every other
    located artist. Unlocated artists, or a lone located artist, get NaN.
    """
    located = sorted((a for a in artists if a.located), key=lambda a: a.id)
    out = {a.id: math.nan for a in artists}
    if len(located) < 2:
        return out
    n = len(located)
    D = np.zeros((n, n))
    for p in range(n):
        for q in range(p + 1, n):
            a, b = located[p], located[q]
            D[p, q] = D[q, p] = haversine(a.latitude, a.longitude, b.latitude, b.longitude)
    means = D.sum(axis=1) / (n - 1)
    for a, m in zip(located, means):
        out[a.id] = float(m)
    return out


@dataclass(frozen=True)
class IlvTable:
    """
    Per-artist covariates aligned with ``ids``.

    ``columns`` maps each name in ``ILV_NAMES`` to a float array (NaN marks a
    missing cell). ``imputed_mask`` marks cells filled by imputation.
    """

    ids: tuple
    columns: dict
    centered: bool = False
    imputed_mask: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ValidationError("duplicate artist ids in covariate table")
        cols = {}
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=float).copy()
            if col.shape != (n,):
                raise ValidationError(f"column {name} has shape {col.shape}, expected ({n},)")
            col.flags.writeable = False
            cols[name] = col
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "_index", {v: k for k, v in enumerate(self.ids)})

    def __len__(self):
        return len(self.ids)

    @property
    def names(self):
        return tuple(self.columns)

    def index(self, ids):
        return np.array([self._index[v] for v in ids], dtype=int)

    def column(self, name):
        return self.columns[name]

    def matrix(self, names, ids=None):
        """Covariate matrix with columns ``names`` for rows ``ids`` (default all)."""
        rows = slice(None) if ids is None else self.index(ids)
        if not names:
            n = len(self.ids) if ids is None else len(ids)
            return np.zeros((n, 0))
        return np.column_stack([self.columns[c][rows] for c in names])

    def value(self, artist, name):
        return float(self.columns[name][self._index[artist]])

    @property
    def has_missing(self):
        return any(np.isnan(c).any() for c in self.columns.values())


def ilv_table(artists):
    """Raw covariate table: coded gender plus popularity, followers, mean distance."""
    artists = sorted(artists, key=lambda a: a.id)
    md = mean_geographic_distance(artists)
    return IlvTable(
        ids=tuple(a.id for a in artists),
        columns={
            "gender": [encode_gender(a.gender_raw) for a in artists],
            "popularity": [a.popularity for a in artists],
            "followers": [a.followers for a in artists],
            "mean_distance": [md[a.id] for a in artists],
        },
    )


def center_ilvs(table):
    """Subtract the column mean from every continuous covariate; gender is left coded."""
    if table.has_missing:
        raise ValidationError("covariate table has missing cells; run rf_impute before centering")
    cols = {}
    for name, col in table.columns.items():
        if name in CONTINUOUS_ILVS:
            col = col - col.mean()
            col = col - col.mean()  # second pass removes rounding residue on large scales
        cols[name] = col
    return replace(table, columns=cols, centered=True)


def impute_ilvs(table, seed, n_jobs=None, **forest_kw):
    """
    Fill missing continuous covariates with ``rf_impute``.

    Gender acts as a predictor only; it is never imputed (missing gender is
    already coded 0).
    """
    names = table.names
    X = table.matrix(names)
    filled, mask = rf_impute(X, seed, n_jobs=n_jobs, **forest_kw)
    cols = {name: filled[:, k] for k, name in enumerate(names)}
    masks = {name: mask[:, k] for k, name in enumerate(names) if mask[:, k].any()}
    return replace(table, columns=cols, imputed_mask=masks)


def prepare_ilvs(table, seed, impute=True, n_jobs=None):
    """Impute then center. Returns the prepared table."""
    if impute:
        table = impute_ilvs(table, seed, n_jobs=n_jobs)
    return center_ilvs(table)
