import os
import json
import hashlib
import logging
from dataclasses import dataclass
from datetime import date
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import pandera as pa
from pandera import Check, Column, DataFrameSchema

from backend.components.errors import (
    CorruptRowError,
    DimensionError,
    EmptyRangeError,
    EmptySplitError,
    MissingArtifactError,
    MissingFileError,
    MissingSeriesError,
    OverlapError,
    SchemaError,
    UnknownTickerError,
)
from backend.components.indicators import FeatureFrame

logger = logging.getLogger(__name__)

PRICE_COLUMNS = ["open", "high", "low", "close"]
OHLCV_COLUMNS = PRICE_COLUMNS + ["volume"]
REQUIRED_COLUMNS = ["date", "ticker"] + OHLCV_COLUMNS
_MISSING_TOKENS = {"", "na", "nan", "null", "none"}
FLOAT_FORMAT = "%.17g"

# Prices and volume may be missing here; clean() fills them.
_OHLCV_SCHEMA = DataFrameSchema(
    {
        "date": Column(pa.DateTime, nullable=False),
        "ticker": Column(str, Check.str_length(min_value=1), nullable=False),
        "open": Column(float, Check.gt(0), nullable=True),
        "high": Column(float, Check.gt(0), nullable=True),
        "low": Column(float, Check.gt(0), nullable=True),
        "close": Column(float, Check.gt(0), nullable=True),
        "volume": Column(float, Check.ge(0), nullable=True),
    },
    strict=False,
)


@dataclass(frozen=True)
class Bar:
    date: date
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass(frozen=True, eq=False)
class AssetSeries:
    """One asset's bars: a DataFrame indexed by date with open/high/low/close/volume."""
    ticker: str
    bars: pd.DataFrame

    def iter_bars(self) -> Iterator[Bar]:
        for ts, row in self.bars.iterrows():
            yield Bar(ts.date(), row["open"], row["high"], row["low"], row["close"], row["volume"])


@dataclass(frozen=True, eq=False)
class MarketFrame:
    tickers: Tuple[str, ...]
    calendar: pd.DatetimeIndex
    series: Dict[str, AssetSeries]

    def take(self, positions: np.ndarray) -> "MarketFrame":
        calendar = self.calendar[positions]
        series = {t: AssetSeries(t, s.bars.iloc[positions].copy()) for t, s in self.series.items()}
        return MarketFrame(self.tickers, calendar, series)

    def restrict(self, calendar: pd.DatetimeIndex) -> "MarketFrame":
        """Sub-frame on the given dates (e.g. the calendar left after feature warmup)."""
        positions = self.calendar.get_indexer(calendar)
        if (positions < 0).any():
            raise DimensionError("requested dates are not part of the frame calendar")
        return self.take(positions)

    def select(self, tickers: Sequence[str]) -> "MarketFrame":
        return MarketFrame(tuple(tickers), self.calendar, {t: self.series[t] for t in tickers})

    def close_matrix(self) -> np.ndarray:
        """Closing prices with shape (T, N)."""
        return np.column_stack([self.series[t].bars["close"].to_numpy(dtype=np.float64) for t in self.tickers])

    def to_long_frame(self) -> pd.DataFrame:
        frames = []
        for ticker in self.tickers:
            part = self.series[ticker].bars[OHLCV_COLUMNS].reset_index(drop=True)
            part.insert(0, "ticker", ticker)
            part.insert(0, "date", self.calendar.strftime("%Y-%m-%d"))
            frames.append(part)
        return pd.concat(frames, ignore_index=True)

    @classmethod
    def from_long_frame(cls, frame: pd.DataFrame) -> "MarketFrame":
        tickers = tuple(pd.unique(frame["ticker"]))
        series = {}
        calendar = None
        for ticker in tickers:
            part = frame.loc[frame["ticker"] == ticker].copy()
            part.index = pd.DatetimeIndex(pd.to_datetime(part["date"]), name="date")
            series[ticker] = AssetSeries(ticker, part[OHLCV_COLUMNS].astype(np.float64))
            calendar = part.index if calendar is None else calendar
        return cls(tickers, calendar, series)


@dataclass(frozen=True, eq=False)
class NormStats:
    """Training-split mean and population std per (asset, feature); shape (N, F) or (F,)."""
    feature_names: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant_mask(self) -> np.ndarray:
        return self.std == 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"feature_names": list(self.feature_names),
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormStats":
        return cls(tuple(data["feature_names"]), np.asarray(data["mean"], dtype=np.float64),
                   np.asarray(data["std"], dtype=np.float64))


def _parse_numeric(raw: pd.DataFrame) -> pd.DataFrame:
    """Turns the string table (indexed by file line) into typed columns, raising on the first corrupt cell."""
    parsed = pd.DataFrame(index=raw.index)
    parsed["ticker"] = raw["ticker"].str.strip()
    parsed["date"] = pd.to_datetime(raw["date"].str.strip(), format="%Y-%m-%d", errors="coerce")

    problems: List[Tuple[int, str]] = []
    for idx in parsed.index[parsed["date"].isna()]:
        problems.append((idx, f"unparseable date {raw.at[idx, 'date']!r}"))
    for idx in parsed.index[parsed["ticker"] == ""]:
        problems.append((idx, "empty ticker"))

    for col in OHLCV_COLUMNS:
        text = raw[col].str.strip()
        missing = text.str.lower().isin(_MISSING_TOKENS)
        values = pd.to_numeric(text.where(~missing), errors="coerce")
        for idx in parsed.index[~missing & values.isna()]:
            problems.append((idx, f"non-numeric {col} value {raw.at[idx, col]!r}"))
        parsed[col] = values.astype(np.float64)

    if problems:
        line, detail = min(problems)
        raise CorruptRowError(line, detail)

    try:
        _OHLCV_SCHEMA.validate(parsed, lazy=True)
    except pa.errors.SchemaErrors as e:
        cases = e.failure_cases.dropna(subset=["index"])
        if cases.empty:
            raise SchemaError(f"OHLCV schema violation: {e}") from e
        first = cases.sort_values("index").iloc[0]
        raise CorruptRowError(int(first["index"]),
                              f"{first['column']} fails {first['check']} (value {first['failure_case']!r})") from e
    return parsed


def load_ohlcv(source: str, tickers: Sequence[str], date_range: Tuple[str, str]) -> MarketFrame:
    """
    Loads long-format OHLCV rows and aligns the requested tickers to their union calendar.

    Args:
        source (str): CSV with header date,ticker,open,high,low,close,volume (extra columns ignored).
        tickers (Sequence[str]): Tickers to keep, in output order.
        date_range (Tuple[str, str]): Inclusive [start, end] in YYYY-MM-DD.

    Returns:
        MarketFrame: Chronologically sorted, calendar-aligned series; dates an asset
        did not trade carry NaN until clean() fills them.
    """
    if not os.path.exists(source):
        raise MissingFileError(f"OHLCV file not found: {source}")

    try:
        raw = pd.read_csv(source, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.ParserError as e:
        raise SchemaError(f"cannot parse {source}: {e}") from e
    # Index rows by their physical file line (header is line 1)
    raw.index = raw.index + 2
    first_cell = raw.iloc[:, 0].fillna("").str.strip()
    skipped = raw.isna().all(axis=1) | first_cell.str.startswith("#") | raw.fillna("").eq("").all(axis=1)
    raw = raw[~skipped].fillna("")
    raw.columns = [c.strip().lower() for c in raw.columns]
    missing_cols = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing_cols:
        raise SchemaError(f"{source} lacks required columns: {missing_cols}")
    rows = _parse_numeric(raw[REQUIRED_COLUMNS])

    available = set(rows["ticker"])
    unknown = [t for t in tickers if t not in available]
    if unknown:
        raise UnknownTickerError(f"tickers not present in {source}: {unknown}")

    start, end = pd.Timestamp(date_range[0]), pd.Timestamp(date_range[1])
    if start > end:
        raise EmptyRangeError(f"date range start {date_range[0]} is after end {date_range[1]}")
    rows = rows[rows["ticker"].isin(tickers) & (rows["date"] >= start) & (rows["date"] <= end)]
    if rows.empty:
        raise EmptyRangeError(f"no rows for {list(tickers)} between {date_range[0]} and {date_range[1]}")

    duplicated = rows.duplicated(subset=["date", "ticker"], keep="last")
    if duplicated.any():
        logger.warning("Dropping %d duplicate (date, ticker) rows, keeping the last occurrence", int(duplicated.sum()))
        rows = rows[~duplicated]

    calendar = pd.DatetimeIndex(sorted(rows["date"].unique()), name="date")
    series = {}
    for ticker in tickers:
        bars = rows[rows["ticker"] == ticker].set_index("date").sort_index()[OHLCV_COLUMNS]
        series[ticker] = AssetSeries(ticker, bars.reindex(calendar))
    logger.info("Loaded %d rows for %d tickers over %d dates from %s",
                len(rows), len(tickers), len(calendar), source)
    return MarketFrame(tuple(tickers), calendar, series)


def clean(frame: MarketFrame) -> MarketFrame:
    """
    Forward-fills prices, zero-fills volume, drops leading dates where any asset
    has no prior observation, and repairs the high/low envelope.
    """
    filled: Dict[str, pd.DataFrame] = {}
    valid = np.ones(len(frame.calendar), dtype=bool)
    for ticker in frame.tickers:
        bars = frame.series[ticker].bars
        if bars[PRICE_COLUMNS].isna().all().any():
            raise MissingSeriesError(f"asset {ticker} has no price observations in the requested range")
        out = bars.copy()
        out[PRICE_COLUMNS] = out[PRICE_COLUMNS].ffill()
        out["volume"] = out["volume"].fillna(0.0)
        valid &= out[PRICE_COLUMNS].notna().all(axis=1).to_numpy()
        filled[ticker] = out

    if not valid.any():
        raise MissingSeriesError("no date has observations for every asset")
    first = int(np.argmax(valid))
    if first > 0:
        logger.info("Dropping %d leading dates lacking an observation for every asset", first)

    series = {}
    repaired = 0
    for ticker, bars in filled.items():
        bars = bars.iloc[first:].copy()
        high = bars[["high", "open", "close"]].max(axis=1)
        low = bars[["low", "open", "close"]].min(axis=1)
        repaired += int((high != bars["high"]).sum() + (low != bars["low"]).sum())
        bars["high"], bars["low"] = high, low
        series[ticker] = AssetSeries(ticker, bars)
    if repaired:
        logger.warning("Repaired %d high/low values outside the open/close envelope", repaired)
    return MarketFrame(frame.tickers, frame.calendar[first:], series)


def compute_norm_stats(features: FeatureFrame, per_asset: bool = True) -> NormStats:
    """Population mean/std over the given (training) features; near-zero std snaps to 0."""
    axes = 0 if per_asset else (0, 1)
    mean = features.values.mean(axis=axes)
    std = features.values.std(axis=axes)
    tiny = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(tiny, 0.0, std)
    if tiny.any():
        logger.warning("%d constant feature column(s) will normalize to 0", int(tiny.sum()))
    return NormStats(tuple(features.feature_names), mean, std)


def _check_stats(values: np.ndarray, stats: NormStats) -> None:
    if stats.mean.shape != stats.std.shape:
        raise DimensionError("NormStats mean and std shapes differ")
    if stats.mean.shape[-1] != values.shape[-1]:
        raise DimensionError(f"stats cover {stats.mean.shape[-1]} features, values have {values.shape[-1]}")
    if stats.mean.ndim == 2 and (values.ndim < 2 or stats.mean.shape[0] != values.shape[-2]):
        raise DimensionError(f"stats cover {stats.mean.shape[0]} assets, values do not match")


def zscore(features: Union[FeatureFrame, np.ndarray], stats: NormStats) -> Union[FeatureFrame, np.ndarray]:
    """(v - mean) / std per feature; constant features map to 0."""
    values = features.values if isinstance(features, FeatureFrame) else np.asarray(features, dtype=np.float64)
    _check_stats(values, stats)
    if isinstance(features, FeatureFrame) and tuple(features.feature_names) != tuple(stats.feature_names):
        raise DimensionError("feature names differ from those the stats were computed on")
    constant = stats.constant_mask
    safe_std = np.where(constant, 1.0, stats.std)
    normalized = np.where(constant, 0.0, (values - stats.mean) / safe_std)
    if isinstance(features, FeatureFrame):
        return features.with_values(normalized)
    return normalized


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    _check_stats(values, stats)
    return values * stats.std + stats.mean


def split_by_date(frame, train_end: str, test_range: Tuple[str, str], train_start: Optional[str] = None):
    """
    Chronological train/test split of a MarketFrame or FeatureFrame.

    Args:
        frame: Anything with `calendar` and `take(positions)`.
        train_end (str): Last training date (inclusive).
        test_range (Tuple[str, str]): Inclusive test [start, end].
        train_start (Optional[str]): First training date; defaults to the frame start.

    Returns:
        Tuple: (train, test) frames of the same type as the input.
    """
    t_end = pd.Timestamp(train_end)
    test_start, test_end = pd.Timestamp(test_range[0]), pd.Timestamp(test_range[1])
    if test_start > test_end:
        raise EmptySplitError(f"test range {test_range[0]}..{test_range[1]} is empty")
    if t_end >= test_start:
        raise OverlapError(f"train_end {train_end} is not before test start {test_range[0]}")

    calendar = frame.calendar
    train_mask = calendar <= t_end
    if train_start is not None:
        train_mask &= calendar >= pd.Timestamp(train_start)
    test_mask = (calendar >= test_start) & (calendar <= test_end)
    if not train_mask.any():
        raise EmptySplitError(f"no frame dates in the training range ending {train_end}")
    if not test_mask.any():
        raise EmptySplitError(f"no frame dates in test range {test_range[0]}..{test_range[1]}")

    train_idx, test_idx = np.flatnonzero(train_mask), np.flatnonzero(test_mask)
    if test_idx[0] - train_idx[-1] > 1:
        logger.warning("%d frame dates fall between the train and test splits", int(test_idx[0] - train_idx[-1] - 1))
    return frame.take(train_idx), frame.take(test_idx)


def data_fingerprint(frame: MarketFrame) -> str:
    payload = frame.to_long_frame().to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class DataLoader:
    """
    Handles all file system operations for a run directory: stage caches,
    manifests, CSV/JSON artifacts and listing of backtest outputs.
    """
    def __init__(self, base_dir: str = 'runs'):
        self.base_dir = base_dir
        self.ingest_dir = os.path.join(self.base_dir, 'ingest')
        self.features_dir = os.path.join(self.base_dir, 'features')
        self.train_dir = os.path.join(self.base_dir, 'train')
        self.backtest_dir = os.path.join(self.base_dir, 'backtest')
        self.report_dir = os.path.join(self.base_dir, 'report')

        # Ensure directories exist
        for directory in (self.ingest_dir, self.features_dir, self.train_dir, self.backtest_dir, self.report_dir):
            os.makedirs(directory, exist_ok=True)

    # --- Generic artifact writers ---
    @staticmethod
    def write_json(path: str, data: Any) -> str:
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @staticmethod
    def read_json(path: str) -> Any:
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing artifact: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)

    @staticmethod
    def write_csv(path: str, frame: pd.DataFrame, header: Optional[Dict[str, str]] = None) -> str:
        """Writes a CSV, preceded by '# key=value' provenance lines."""
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for key, value in sorted((header or {}).items()):
                f.write(f"# {key}={value}\n")
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return path

    @staticmethod
    def read_csv(path: str) -> pd.DataFrame:
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing artifact: {path}")
        # Only empty cells are missing, so tickers like NA or NULL survive the round trip
        return pd.read_csv(path, comment='#', keep_default_na=False, na_values=[""])

    # --- Stage caches ---
    def save_market_frame(self, frame: MarketFrame, manifest: Dict[str, Any]) -> str:
        header = {k: manifest[k] for k in ("config_hash", "data_fingerprint") if k in manifest}
        path = self.write_csv(os.path.join(self.ingest_dir, 'market_frame.csv'), frame.to_long_frame(), header)
        self.write_json(os.path.join(self.ingest_dir, 'manifest.json'), manifest)
        return path

    def load_market_frame(self) -> Tuple[MarketFrame, Dict[str, Any]]:
        path = os.path.join(self.ingest_dir, 'market_frame.csv')
        if not os.path.exists(path):
            raise MissingArtifactError(f"ingest cache not found at {path}; run the ingest stage first")
        manifest = self.read_json(os.path.join(self.ingest_dir, 'manifest.json'))
        return MarketFrame.from_long_frame(self.read_csv(path)), manifest

    def save_feature_frame(self, features: FeatureFrame, manifest: Dict[str, Any]) -> str:
        header = {k: manifest[k] for k in ("config_hash", "data_fingerprint") if k in manifest}
        path = self.write_csv(os.path.join(self.features_dir, 'features.csv'), features.to_long_frame(), header)
        self.write_json(os.path.join(self.features_dir, 'manifest.json'), manifest)
        return path

    def load_feature_frame(self) -> Tuple[FeatureFrame, Dict[str, Any]]:
        path = os.path.join(self.features_dir, 'features.csv')
        if not os.path.exists(path):
            raise MissingArtifactError(f"feature cache not found at {path}; run the features stage first")
        manifest = self.read_json(os.path.join(self.features_dir, 'manifest.json'))
        features = FeatureFrame.from_long_frame(self.read_csv(path), manifest.get("warmup_dropped", 0))
        return features, manifest

    def get_backtest_runs(self) -> List[str]:
        """
        Retrieves the backtest output directories that contain a report.

        Returns:
            List[str]: A sorted list of run names.
        """
        if not os.path.isdir(self.backtest_dir):
            return []
        runs = []
        for name in os.listdir(self.backtest_dir):
            if os.path.exists(os.path.join(self.backtest_dir, name, 'report.json')):
                runs.append(name)
        return sorted(runs)
