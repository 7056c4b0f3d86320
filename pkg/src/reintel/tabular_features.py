"""Metadata feature matrix: imputation, timestamp expansion, user history, scaling.

Missing values are ``NaN`` inside numpy arrays. Counts are mean-imputed; the
timestamp is imputed by chained-equation regression on the (already imputed)
counts, then split into calendar fields.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from reintel import ReintelError
from reintel.dataset_io import RawPost
from reintel.text_preprocess import TextStats

logger = logging.getLogger(__name__)

COUNT_COLUMNS = ("num_likes", "num_shares", "num_comments")
TIME_COLUMNS = ("day", "month", "year", "hour", "weekday")
STAT_COLUMNS = TextStats.FIELDS
HISTORY_COLUMNS = ("user_n_unreliable", "user_n_reliable", "user_ratio")
BOOLEAN_COLUMNS = ("has_image",)
ALL_COLUMNS = COUNT_COLUMNS + TIME_COLUMNS + STAT_COLUMNS + HISTORY_COLUMNS + BOOLEAN_COLUMNS

HISTORY_SMOOTHING = 1.0
STD_EPS = 1e-12


class FeatureError(ReintelError, ValueError):
    pass


def mean_impute(column) -> np.ndarray:
    """Fill NaNs with the mean of the observed entries (0 if none are observed)."""
    col = np.asarray(column, dtype=np.float64).copy()
    missing = np.isnan(col)
    if not missing.any():
        return col
    if missing.all():
        warnings.warn("column has no observed values; filling with 0", RuntimeWarning, stacklevel=2)
        col[:] = 0.0
        return col
    col[missing] = col[~missing].mean()
    return col


def _ridge_fit(X: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    # Columns are centred so the intercept is not penalized.
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc + ridge * np.eye(X.shape[1])
    coef = np.linalg.solve(gram, Xc.T @ (y - y_mean))
    if not np.all(np.isfinite(coef)):
        raise np.linalg.LinAlgError("non-finite ridge coefficients")
    intercept = y_mean - x_mean @ coef
    return np.concatenate([coef, [intercept]])


def mice_impute(matrix, rounds: int = 10, seed: int = 0, ridge: float = 1e-6) -> np.ndarray:
    """Chained-equations imputation with ridge linear regressions.

    Missing cells start at their column mean. Each round visits the columns
    that had missing entries, regresses the column's observed rows on every
    other column (current values) and overwrites only its missing rows with
    the predictions. Observed cells never change.

    There are no random draws, so the result depends only on the inputs;
    ``seed`` is kept so callers can pass their substream seed uniformly.
    """
    del seed
    X = np.array(matrix, dtype=np.float64, copy=True)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("mice_impute needs a 2-D matrix with at least 2 columns")
    missing = np.isnan(X)
    if not missing.any():
        return X
    targets = [j for j in range(X.shape[1]) if missing[:, j].any()]
    regressable = []
    for j in targets:
        X[:, j] = mean_impute(X[:, j])
    for j in targets:
        if (~missing[:, j]).sum() >= 2:
            regressable.append(j)
        else:
            warnings.warn(
                f"column {j} has fewer than 2 observed values; keeping mean imputation",
                RuntimeWarning,
                stacklevel=2,
            )

    for _ in range(rounds):
        for j in list(regressable):
            obs = ~missing[:, j]
            others = np.delete(X, j, axis=1)
            try:
                beta = _ridge_fit(others[obs], X[obs, j], ridge)
            except np.linalg.LinAlgError:
                warnings.warn(
                    f"regression for column {j} is singular; falling back to mean imputation",
                    RuntimeWarning,
                    stacklevel=2,
                )
                X[missing[:, j], j] = X[obs, j].mean()
                regressable.remove(j)
                continue
            X[missing[:, j], j] = others[missing[:, j]] @ beta[:-1] + beta[-1]
    return X


def expand_timestamp(ts: float) -> tuple[int, int, int, int, int]:
    """(day, month, year, hour, weekday) in UTC, Monday = 0."""
    if ts is None or (isinstance(ts, float) and math.isnan(ts)):
        raise ValueError("timestamp must be imputed before expansion")
    when = dt.datetime.fromtimestamp(math.floor(ts), tz=dt.timezone.utc)
    return when.day, when.month, when.year, when.hour, when.weekday()


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    n_unreliable: int = 0
    n_reliable: int = 0

    @property
    def ratio(self) -> float:
        a = HISTORY_SMOOTHING
        return (self.n_unreliable + a) / (self.n_unreliable + self.n_reliable + 2 * a)

    def as_features(self) -> tuple[float, float, float]:
        return float(self.n_unreliable), float(self.n_reliable), self.ratio


def compute_user_histories(train_posts: Iterable[RawPost]) -> dict[str, UserHistory]:
    """Per-user label counts; must only ever see the training split."""
    counts: dict[str, list[int]] = {}
    for p in train_posts:
        if p.label is None:
            raise FeatureError(f"post {p.id!r} is unlabeled; histories need labels")
        c = counts.setdefault(p.user_id, [0, 0])
        c[0 if p.label == 1 else 1] += 1
    return {u: UserHistory(u, n_unrel, n_rel) for u, (n_unrel, n_rel) in counts.items()}


def lookup_history(histories: Mapping[str, UserHistory], user_id: str) -> UserHistory:
    return histories.get(user_id) or UserHistory(user_id)


@dataclass(frozen=True)
class StandardizationParams:
    means: np.ndarray
    stds: np.ndarray


@dataclass
class FeatureMatrix:
    values: np.ndarray
    column_names: tuple[str, ...]
    boolean_mask: np.ndarray
    standardization_params: StandardizationParams | None = None
    row_ids: tuple[str, ...] = ()

    @property
    def shape(self):
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]


@dataclass(frozen=True)
class FeatureConfig:
    drop_columns: tuple[str, ...] = ()
    mice_rounds: int = 10
    mice_ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        unknown = [c for c in self.drop_columns if c not in ALL_COLUMNS]
        if unknown:
            raise FeatureError(f"unknown feature column(s): {', '.join(unknown)}")

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(c for c in ALL_COLUMNS if c not in self.drop_columns)


def _as_float(value) -> float:
    return np.nan if value is None else float(value)


def build_feature_matrix(
    posts: Sequence[RawPost],
    histories: Mapping[str, UserHistory],
    raw_stats: Sequence[TextStats],
    config: FeatureConfig = FeatureConfig(),
) -> FeatureMatrix:
    if len(raw_stats) != len(posts):
        raise FeatureError(f"{len(posts)} posts but {len(raw_stats)} text statistics")
    n = len(posts)
    counts = np.array(
        [[_as_float(getattr(p, c)) for c in COUNT_COLUMNS] for p in posts], dtype=np.float64
    ).reshape(n, len(COUNT_COLUMNS))
    counts = np.column_stack([mean_impute(counts[:, j]) for j in range(counts.shape[1])]) if n else counts

    ts = np.array([_as_float(p.timestamp) for p in posts], dtype=np.float64)
    if n and np.isnan(ts).any():
        if np.isnan(ts).all():
            ts = mean_impute(ts)
        else:
            joint = mice_impute(
                np.column_stack([ts, counts]),
                rounds=config.mice_rounds,
                seed=config.seed,
                ridge=config.mice_ridge,
            )
            ts = joint[:, 0]
    times = np.array([expand_timestamp(t) for t in ts], dtype=np.float64).reshape(n, len(TIME_COLUMNS))

    stats = np.array([s.as_tuple() for s in raw_stats], dtype=np.float64).reshape(n, len(STAT_COLUMNS))
    hist = np.array(
        [lookup_history(histories, p.user_id).as_features() for p in posts], dtype=np.float64
    ).reshape(n, len(HISTORY_COLUMNS))
    has_image = np.array([[1.0 if p.has_image else 0.0] for p in posts], dtype=np.float64).reshape(n, 1)

    full = np.hstack([counts, times, stats, hist, has_image])
    keep = [ALL_COLUMNS.index(c) for c in config.columns]
    names = config.columns
    return FeatureMatrix(
        values=full[:, keep],
        column_names=names,
        boolean_mask=np.array([c in BOOLEAN_COLUMNS for c in names]),
        row_ids=tuple(p.id for p in posts),
    )


def standardize(
    matrix: FeatureMatrix, fit: bool, params: StandardizationParams | None = None
) -> FeatureMatrix:
    """Scale non-boolean columns to zero mean and unit (population) variance.

    With ``fit=False`` the given ``params`` (or those stored on ``matrix``)
    are applied unchanged, which is how validation and test rows reuse the
    training statistics.
    """
    X = matrix.values
    if fit:
        means = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
        stds = X.std(axis=0) if len(X) else np.ones(X.shape[1])
        params = StandardizationParams(means, stds)
    else:
        params = params or matrix.standardization_params
        if params is None:
            raise FeatureError("standardize(fit=False) needs fitted parameters")
        if len(params.means) != X.shape[1]:
            raise FeatureError(f"parameters cover {len(params.means)} columns, matrix has {X.shape[1]}")
    out = X.copy()
    for j in range(X.shape[1]):
        if matrix.boolean_mask[j]:
            continue
        if params.stds[j] < STD_EPS:
            out[:, j] = 0.0
        else:
            out[:, j] = (X[:, j] - params.means[j]) / params.stds[j]
    return replace(matrix, values=out, standardization_params=params)


def write_feature_matrix(path: str | Path, matrix: FeatureMatrix) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("id",) + matrix.column_names)
        ids = matrix.row_ids or tuple(str(i) for i in range(len(matrix.values)))
        for rid, row in zip(ids, matrix.values):
            writer.writerow([rid] + [repr(float(v)) for v in row])


def read_feature_matrix(path: str | Path) -> FeatureMatrix:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(header[1:])
        ids, rows = [], []
        for cells in reader:
            ids.append(cells[0])
            rows.append([float(v) for v in cells[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return FeatureMatrix(
        values=values,
        column_names=names,
        boolean_mask=np.array([c in BOOLEAN_COLUMNS for c in names]),
        row_ids=tuple(ids),
    )


def write_sidecar(
    path: str | Path,
    column_names: Sequence[str],
    params: StandardizationParams,
    histories: Mapping[str, UserHistory],
) -> None:
    """Key/value text file holding everything needed to featurize new posts."""
    lines = ["columns\t" + ",".join(column_names)]
    for name, mu, sd in zip(column_names, params.means, params.stds):
        lines.append(f"std.{name}\t{float(mu)!r},{float(sd)!r}")
    for user in sorted(histories):
        h = histories[user]
        lines.append(f"history.{user}\t{h.n_unreliable},{h.n_reliable}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sidecar(path: str | Path) -> tuple[tuple[str, ...], StandardizationParams, dict[str, UserHistory]]:
    columns: tuple[str, ...] = ()
    stats: dict[str, tuple[float, float]] = {}
    histories: dict[str, UserHistory] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        key, value = line.split("\t", 1)
        if key == "columns":
            columns = tuple(value.split(",")) if value else ()
        elif key.startswith("std."):
            mu, sd = value.split(",")
            stats[key[4:]] = (float(mu), float(sd))
        elif key.startswith("history."):
            u, r = value.split(",")
            user = key[len("history."):]
            histories[user] = UserHistory(user, int(u), int(r))
        else:
            raise FeatureError(f"{path}: unknown sidecar key {key!r}")
    params = StandardizationParams(
        np.array([stats[c][0] for c in columns]), np.array([stats[c][1] for c in columns])
    )
    return columns, params, histories
