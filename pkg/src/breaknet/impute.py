"""Iterative random-forest imputation of numeric tables (missForest style)."""

import math

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .errors import ValidationError

FOREST_DEFAULTS = dict(n_estimators=100, min_samples_leaf=5, bootstrap=True)


def rf_impute(X, seed, max_iter=10, n_jobs=None, **forest_kw):
    """
    Fill NaN cells of a numeric matrix with random-forest predictions.

    Missing cells start at their column mean. Each sweep visits the incomplete
    columns from fewest to most missing values, fits a regression forest on
    the rows where that column is observed (all other columns as predictors)
    and overwrites the missing cells with its predictions. Sweeps stop when
    the summed squared change of the imputed cells no longer decreases, in
    which case the previous sweep's result is kept, or after ``max_iter``.

    Parameters
    ----------
    X : array_like, shape (n, p)
        Table with NaN for missing cells. ``p`` must be at least 2.
    seed : int
        Fixes every forest; identical seeds give identical output.
    max_iter : int
        Maximum number of sweeps.
    n_jobs : int, optional
        Workers for tree training. Output does not depend on it.
    **forest_kw
        Overrides for the forest hyperparameters (100 trees, leaf size 5,
        bootstrap resampling, ceil(p_predictors / 3) features per split).

    Returns
    -------
    filled : ndarray, shape (n, p)
    mask : ndarray of bool, shape (n, p)
        True where a cell was imputed.
    """
    X = np.array(X, dtype=float)
    if X.ndim != 2:
        raise ValidationError("imputation needs a 2-d table")
    n, p = X.shape
    if p < 2:
        raise ValidationError("imputation needs at least two columns")
    mask = np.isnan(X)
    if not mask.any():
        return X, mask
    n_missing = mask.sum(axis=0)
    full = np.flatnonzero(n_missing == n)
    if full.size:
        raise ValidationError(f"column(s) {full.tolist()} have no observed values")

    order = [int(c) for c in np.argsort(n_missing, kind="stable") if n_missing[c] > 0]
    params = dict(FOREST_DEFAULTS)
    params["max_features"] = math.ceil((p - 1) / 3)
    params.update(forest_kw)

    current = X.copy()
    col_means = np.nanmean(X, axis=0)
    current[mask] = np.take(col_means, np.nonzero(mask)[1])

    seeds = np.random.SeedSequence(seed).generate_state(max_iter * len(order))
    prev, prev_change = current.copy(), math.inf
    for it in range(max_iter):
        for pos, col in enumerate(order):
            miss = mask[:, col]
            others = [c for c in range(p) if c != col]
            forest = RandomForestRegressor(
                random_state=int(seeds[it * len(order) + pos]), n_jobs=n_jobs, **params
            )
            forest.fit(current[~miss][:, others], current[~miss, col])
            # average trees in a fixed order so threading cannot change rounding
            Xm = current[miss][:, others]
            current[miss, col] = np.mean([t.predict(Xm) for t in forest.estimators_], axis=0)
        change = float(np.sum((current[mask] - prev[mask]) ** 2))
        if change >= prev_change:
            return prev, mask
        prev, prev_change = current.copy(), change
    return current, mask
