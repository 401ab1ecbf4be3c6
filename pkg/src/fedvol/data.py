"""Price ingestion, synthetic GARCH markets, feature engineering and client partitioning.

All functions are pure: inputs are never mutated and every random draw comes
from an explicitly seeded ``numpy.random.Generator``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ParameterError, SizeError, ValidationError

CSV_HEADER = ("Date", "Open", "High", "Low", "Close", "Adj Close", "Volume")

# Per-quarter log-scale of the GARCH intercept's standard deviation (Q1 highest).
QUARTER_LEVELS = (1.0, 1.0 / 3.0, -1.0 / 3.0, -1.0)

N_CALENDAR = 6


# --------------------------------------------------------------------------
# series types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PriceSeries:
    market_id: str
    dates: np.ndarray  # datetime64[D], strictly increasing
    closes: np.ndarray  # float64, > 0

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        closes = np.asarray(self.closes, dtype=np.float64)
        if dates.shape != closes.shape or dates.ndim != 1:
            raise ValidationError("dates and closes must be 1-D arrays of equal length")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise ValidationError("dates must be strictly increasing")
        if not np.all(np.isfinite(closes)) or np.any(closes <= 0):
            raise ValidationError("close prices must be finite and positive")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "closes", closes)

    def __len__(self):
        return len(self.closes)

    @property
    def rows(self):
        return [(d.item(), float(c)) for d, c in zip(self.dates, self.closes)]


@dataclass(frozen=True)
class ReturnSeries:
    """Dated per-day values (log-returns or statistics derived from them)."""

    market_id: str
    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", np.asarray(self.dates, dtype="datetime64[D]"))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.dates.shape != self.values.shape:
            raise ValidationError("dates and values must have equal length")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class GarchParams:
    omega: float = 5e-6
    alpha: float = 0.10
    beta: float = 0.85

    def __post_init__(self):
        if self.omega <= 0 or self.alpha < 0 or self.beta < 0:
            raise ParameterError("GARCH requires omega > 0, alpha >= 0, beta >= 0")
        if self.alpha + self.beta >= 1:
            raise ParameterError(
                f"alpha + beta = {self.alpha + self.beta} must be < 1 for stationarity"
            )

    @property
    def unconditional_variance(self):
        return self.omega / (1.0 - self.alpha - self.beta)


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def load_price_csv(source, market_id: str) -> PriceSeries:
    """Read a Yahoo-Finance style daily export; only ``Date`` and ``Close`` are used.

    ``source`` may be bytes, text, or a binary/text file object. Rows whose
    Close is empty or ``null`` are skipped; rows are sorted by date.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise FormatError(f"input is not UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(source))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty input; expected header " + ",".join(CSV_HEADER)) from None
    header = tuple(h.strip() for h in header)
    if header != CSV_HEADER:
        raise FormatError(f"malformed header {','.join(header)!r}; expected {','.join(CSV_HEADER)!r}")

    dates, closes = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(CSV_HEADER):
            raise FormatError(f"line {lineno}: expected {len(CSV_HEADER)} columns, got {len(row)}")
        raw_close = row[4].strip()
        if raw_close == "" or raw_close.lower() == "null":
            continue
        try:
            day = date.fromisoformat(row[0].strip())
        except ValueError:
            raise ValidationError(f"line {lineno}: unparseable date {row[0]!r}") from None
        try:
            close = float(raw_close)
        except ValueError:
            raise ValidationError(f"line {lineno}: unparseable close {raw_close!r}") from None
        if not math.isfinite(close) or close <= 0:
            raise ValidationError(f"line {lineno}: close price must be positive, got {raw_close}")
        dates.append(np.datetime64(day, "D"))
        closes.append(close)

    dates_arr = np.array(dates, dtype="datetime64[D]")
    closes_arr = np.array(closes, dtype=np.float64)
    order = np.argsort(dates_arr, kind="stable")
    dates_arr, closes_arr = dates_arr[order], closes_arr[order]
    dup = np.nonzero(dates_arr[1:] == dates_arr[:-1])[0]
    if len(dup):
        raise ValidationError(f"duplicate date {dates_arr[dup[0]]}")
    return PriceSeries(market_id, dates_arr, closes_arr)


def write_price_csv(series: PriceSeries, dest) -> None:
    """Write ``series`` in the same 7-column layout ``load_price_csv`` reads.

    OHLC columns all carry the close; volume is 0.
    """
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    fh = open(dest, "w", newline="", encoding="utf-8") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for d, c in zip(series.dates, series.closes):
            px = repr(float(c))
            w.writerow([str(d), px, px, px, px, px, "0"])
    finally:
        if own:
            fh.close()


def business_days(start: date, n: int) -> np.ndarray:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    return np.busday_offset(first, np.arange(n), roll="forward")


def generate_synthetic(
    n_days: int,
    params: GarchParams = GarchParams(),
    seasonal_amp: float = 0.0,
    start_date: date = date(2015, 1, 1),
    seed: int = 0,
    market_id: str = "SYN",
    initial_price: float = 100.0,
) -> PriceSeries:
    """GARCH(1,1) log-price path on a Mon-Fri calendar.

    ``seasonal_amp`` scales the variance intercept by quarter:
    ``omega_t = omega * exp(2 * seasonal_amp * QUARTER_LEVELS[q(t)])``, so the
    conditional-volatility level drifts toward a quarter-specific plateau.
    With ``seasonal_amp = 0`` this is the plain recursion.
    """
    if not isinstance(params, GarchParams):
        params = GarchParams(*params)
    if n_days < 30:
        raise SizeError(f"n_days must be >= 30, got {n_days}")
    if seasonal_amp < 0:
        raise ParameterError("seasonal_amp must be >= 0")

    dates = business_days(start_date, n_days)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_days - 1)

    quarter = (dates.astype("datetime64[M]").astype(np.int64) % 12) // 3
    levels = np.asarray(QUARTER_LEVELS)[quarter]
    omega_t = params.omega * np.exp(2.0 * seasonal_amp * levels)

    r = np.empty(n_days - 1)
    var = params.unconditional_variance
    prev_r = 0.0
    for t in range(n_days - 1):
        if t > 0:
            var = omega_t[t + 1] + params.alpha * prev_r * prev_r + params.beta * var
        prev_r = math.sqrt(var) * z[t]
        r[t] = prev_r

    log_p = math.log(initial_price) + np.concatenate(([0.0], np.cumsum(r)))
    return PriceSeries(market_id, dates, np.exp(log_p))


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

def log_returns(p: PriceSeries) -> ReturnSeries:
    if len(p) < 2:
        raise SizeError("need at least 2 prices for a log-return")
    return ReturnSeries(p.market_id, p.dates[1:], np.log(p.closes[1:] / p.closes[:-1]))


def _check_window(r: ReturnSeries, window: int):
    if window > len(r):
        raise SizeError(f"window {window} exceeds series length {len(r)}")


def rolling_mean(r: ReturnSeries, window: int = 5) -> ReturnSeries:
    """Trailing mean, valid mode, dated by the window's last day."""
    if window < 1:
        raise ParameterError("window must be >= 1")
    _check_window(r, window)
    if window == 1:
        return ReturnSeries(r.market_id, r.dates.copy(), r.values.copy())
    vals = sliding_window_view(r.values, window).mean(axis=1)
    return ReturnSeries(r.market_id, r.dates[window - 1:], vals)


def volatility_proxy(r: ReturnSeries, window: int = 5) -> ReturnSeries:
    """Trailing population standard deviation of raw log-returns."""
    if window < 2:
        raise ParameterError("volatility window must be >= 2")
    _check_window(r, window)
    vals = sliding_window_view(r.values, window).std(axis=1)
    return ReturnSeries(r.market_id, r.dates[window - 1:], vals)


def cumulative_returns(r: ReturnSeries) -> ReturnSeries:
    return ReturnSeries(r.market_id, r.dates, np.cumsum(r.values))


def calendar_features(d: date) -> tuple:
    """sin/cos phases of day-of-week (Mon=0), month and day-of-month."""
    tau = 2.0 * math.pi
    a = tau * d.weekday() / 7.0
    b = tau * (d.month - 1) / 12.0
    c = tau * (d.day - 1) / 31.0
    return (math.sin(a), math.cos(a), math.sin(b), math.cos(b), math.sin(c), math.cos(c))


def calendar_matrix(dates: np.ndarray) -> np.ndarray:
    """Vectorised ``calendar_features`` over a datetime64[D] array -> (n, 6)."""
    days = np.asarray(dates, dtype="datetime64[D]")
    dow = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
    months = days.astype("datetime64[M]")
    month0 = months.astype(np.int64) % 12
    dom0 = (days - months.astype("datetime64[D]")).astype(np.int64)
    tau = 2.0 * np.pi
    a = tau * dow / 7.0
    b = tau * month0 / 12.0
    c = tau * dom0 / 31.0
    return np.column_stack([np.sin(a), np.cos(a), np.sin(b), np.cos(b), np.sin(c), np.cos(c)])


# --------------------------------------------------------------------------
# samples
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    date: date  # target day (t + 1)
    window: np.ndarray  # (horizon, d)
    label: int | None
    market_id: str
    target_vol: float
    last_feature_date: date


@dataclass(frozen=True)
class SampleSet:
    """Column-oriented collection of windowed samples.

    ``dates`` are the prediction-target days; ``feature_end`` the last day
    whose features appear in the window.
    """

    X: np.ndarray  # (n, horizon, d)
    targets: np.ndarray  # (n,) next-day volatility
    dates: np.ndarray  # (n,) datetime64[D]
    feature_end: np.ndarray  # (n,) datetime64[D]
    market: np.ndarray  # (n,) str
    labels: np.ndarray | None = None
    threshold: float | None = None

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, i) -> Sample:
        return Sample(
            date=self.dates[i].item(),
            window=self.X[i],
            label=None if self.labels is None else int(self.labels[i]),
            market_id=str(self.market[i]),
            target_vol=float(self.targets[i]),
            last_feature_date=self.feature_end[i].item(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def horizon(self):
        return self.X.shape[1]

    @property
    def n_features(self):
        return self.X.shape[2]

    def keys(self) -> list:
        """Sample identities as (market_id, target date) pairs."""
        return [(str(m), d.item()) for m, d in zip(self.market, self.dates)]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(
            X=self.X[idx],
            targets=self.targets[idx],
            dates=self.dates[idx],
            feature_end=self.feature_end[idx],
            market=self.market[idx],
            labels=None if self.labels is None else self.labels[idx],
            threshold=self.threshold,
        )

    def with_X(self, X) -> "SampleSet":
        return replace(self, X=X)

    def sorted(self) -> "SampleSet":
        """Chronological order, ties broken by market id."""
        order = np.lexsort((self.market, self.dates))
        return self.subset(order)

    @staticmethod
    def concat(sets: Sequence["SampleSet"]) -> "SampleSet":
        sets = list(sets)
        if not sets:
            raise SizeError("nothing to concatenate")
        labeled = [s.labels is not None for s in sets]
        if any(labeled) and not all(labeled):
            raise ValidationError("cannot mix labeled and unlabeled sample sets")
        thresholds = {s.threshold for s in sets}
        return SampleSet(
            X=np.concatenate([s.X for s in sets]),
            targets=np.concatenate([s.targets for s in sets]),
            dates=np.concatenate([s.dates for s in sets]),
            feature_end=np.concatenate([s.feature_end for s in sets]),
            market=np.concatenate([s.market for s in sets]),
            labels=np.concatenate([s.labels for s in sets]) if all(labeled) else None,
            threshold=thresholds.pop() if len(thresholds) == 1 else None,
        )


def _align(series: Sequence[ReturnSeries]):
    common = series[0].dates
    for s in series[1:]:
        common = np.intersect1d(common, s.dates, assume_unique=True)
    cols = []
    for s in series:
        idx = np.searchsorted(s.dates, common)
        cols.append(s.values[idx])
    return common, cols


def build_samples(
    smoothed: ReturnSeries,
    vols: ReturnSeries,
    horizon: int = 5,
    cumulative: ReturnSeries | None = None,
) -> SampleSet:
    """Slide a ``horizon``-day window over the aligned feature days.

    Row j of a window holds (smoothed return, 6 calendar phases[, cumulative
    return]) for that day; the target is the volatility proxy of the day
    right after the window.
    """
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    parts = [smoothed, vols] + ([cumulative] if cumulative is not None else [])
    dates, cols = _align(parts)
    m = len(dates)
    if m < horizon + 1:
        raise SizeError(f"need at least {horizon + 1} aligned days, got {m}")
    feats = [cols[0][:, None], calendar_matrix(dates)]
    if cumulative is not None:
        feats.append(cols[2][:, None])
    F = np.hstack(feats)
    n = m - horizon
    X = sliding_window_view(F, horizon, axis=0)[:n].transpose(0, 2, 1).copy()
    return SampleSet(
        X=X,
        targets=cols[1][horizon:].copy(),
        dates=dates[horizon:].copy(),
        feature_end=dates[horizon - 1: m - 1].copy(),
        market=np.full(n, smoothed.market_id, dtype=object),
    )


def chrono_split(s: SampleSet, train_fraction: float = 0.8):
    n = len(s)
    if n == 0:
        raise SizeError("cannot split an empty sample set")
    if not 0 < train_fraction < 1:
        raise ParameterError("train_fraction must lie in (0, 1)")
    if n > 1 and np.any(s.dates[1:] < s.dates[:-1]):
        raise ValidationError("samples must be sorted by date before splitting")
    k = math.floor(train_fraction * n + 1e-9)
    return s.subset(np.arange(k)), s.subset(np.arange(k, n))


def label_by_median(train: SampleSet, test: SampleSet):
    """Label 1 iff next-day volatility >= the training median."""
    if len(train) == 0:
        raise SizeError("training set is empty")
    thr = float(np.median(train.targets))
    lab_train = replace(train, labels=(train.targets >= thr).astype(np.int8), threshold=thr)
    lab_test = replace(test, labels=(test.targets >= thr).astype(np.int8), threshold=thr)
    return lab_train, lab_test, thr


@dataclass(frozen=True)
class Partition:
    client_id: int
    samples: SampleSet

    def __len__(self):
        return len(self.samples)


def partition_iid(train: SampleSet, n_clients: int, seed: int) -> list:
    if n_clients < 1:
        raise ParameterError("n_clients must be >= 1")
    if n_clients > len(train):
        raise SizeError(f"{n_clients} clients but only {len(train)} samples")
    perm = np.random.default_rng(seed).permutation(len(train))
    return [
        Partition(k, train.subset(np.sort(chunk)))
        for k, chunk in enumerate(np.array_split(perm, n_clients))
    ]


def partition_quarters(train: SampleSet) -> list:
    """Client q receives every sample whose target month falls in quarter q."""
    q = (train.dates.astype("datetime64[M]").astype(np.int64) % 12) // 3
    return [Partition(k, train.subset(np.nonzero(q == k)[0])) for k in range(4)]


def subsample_fraction(s: SampleSet, fraction: float, seed: int = 0) -> SampleSet:
    """Chronological prefix of floor(fraction * n) samples. ``seed`` is unused by design."""
    if not 0 < fraction <= 1:
        raise ParameterError("fraction must lie in (0, 1]")
    k = math.floor(fraction * len(s) + 1e-9)
    if k == 0:
        raise SizeError(f"fraction {fraction} of {len(s)} samples is empty")
    return s.subset(np.arange(k))


# --------------------------------------------------------------------------
# normalisation and end-to-end preparation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, s: SampleSet) -> "Standardizer":
        if len(s) == 0:
            raise SizeError("cannot fit a standardizer on no samples")
        flat = s.X.reshape(-1, s.X.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std)

    def transform(self, s: SampleSet) -> SampleSet:
        return s.with_X((s.X - self.mean) / self.std)


@dataclass(frozen=True)
class FeatureConfig:
    horizon: int = 5
    smooth_window: int = 5
    vol_window: int = 5
    train_fraction: float = 0.8
    cumulative: bool = False

    @property
    def n_features(self):
        return 1 + N_CALENDAR + int(self.cumulative)


def market_samples(p: PriceSeries, fc: FeatureConfig = FeatureConfig()) -> SampleSet:
    r = log_returns(p)
    return build_samples(
        rolling_mean(r, fc.smooth_window),
        volatility_proxy(r, fc.vol_window),
        horizon=fc.horizon,
        cumulative=cumulative_returns(r) if fc.cumulative else None,
    )


def prepare_market(p: PriceSeries, fc: FeatureConfig = FeatureConfig()):
    """Features -> chronological split -> median labels. Returns (train, test)."""
    train, test = chrono_split(market_samples(p, fc), fc.train_fraction)
    train, test, _ = label_by_median(train, test)
    return train, test


def union(parts: Iterable) -> SampleSet:
    """Pooled samples of several partitions (or sample sets), chronologically ordered."""
    sets = [getattr(p, "samples", p) for p in parts]
    sets = [s for s in sets if len(s)]
    return SampleSet.concat(sets).sorted()
