"""
Technical indicators over daily OHLCV series and assembly of per-asset feature vectors.

Every series function returns a float64 array aligned to its input, with the
first `warmup` entries set to NaN. Outputs at index t only read inputs at
indices <= t.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple, TYPE_CHECKING

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from backend.components.errors import (
    InsufficientDataError,
    InvalidParameterError,
    NumericalError,
)

if TYPE_CHECKING:
    from backend.components.data_loader import MarketFrame

logger = logging.getLogger(__name__)

OHLCV_COLUMNS = ["open", "high", "low", "close", "volume"]


def _as_array(values) -> np.ndarray:
    if isinstance(values, pd.Series):
        values = values.to_numpy()
    return np.asarray(values, dtype=np.float64)


def _ohlc(bars) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    # Accepts an AssetSeries or any DataFrame with open/high/low/close columns
    frame = getattr(bars, "bars", bars)
    return (_as_array(frame["open"]), _as_array(frame["high"]),
            _as_array(frame["low"]), _as_array(frame["close"]))


def _require_int(name: str, value, minimum: int) -> int:
    if int(value) != value or value < minimum:
        raise InvalidParameterError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def _nan_like(n: int) -> np.ndarray:
    return np.full(n, np.nan, dtype=np.float64)


def _rolling(x: np.ndarray, period: int, reducer: Callable) -> np.ndarray:
    out = _nan_like(len(x))
    if len(x) >= period:
        out[period - 1:] = reducer(sliding_window_view(x, period), axis=1)
    return out


# --- Trend ---
def sma(close, period: int) -> np.ndarray:
    period = _require_int("period", period, 1)
    x = _as_array(close)
    if len(x) < period:
        raise InsufficientDataError(f"SMA_{period} needs at least {period} values, got {len(x)}")
    return _rolling(x, period, np.mean)


def ema(close, period: int) -> np.ndarray:
    """EMA seeded with the SMA of the first `period` values; alpha = 2/(period+1)."""
    period = _require_int("period", period, 1)
    x = _as_array(close)
    out = _nan_like(len(x))
    if len(x) < period:
        return out
    alpha = 2.0 / (period + 1.0)
    prev = x[:period].mean()
    out[period - 1] = prev
    for t in range(period, len(x)):
        prev = alpha * x[t] + (1.0 - alpha) * prev
        out[t] = prev
    return out


def heiken_ashi(bars) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    o, h, l, c = _ohlc(bars)
    if len(c) == 0:
        raise InsufficientDataError("Heiken Ashi needs at least one bar")
    ha_close = (o + h + l + c) / 4.0
    ha_open = np.empty_like(ha_close)
    ha_open[0] = (o[0] + c[0]) / 2.0
    for t in range(1, len(c)):
        ha_open[t] = (ha_open[t - 1] + ha_close[t - 1]) / 2.0
    ha_high = np.maximum.reduce([h, ha_open, ha_close])
    ha_low = np.minimum.reduce([l, ha_open, ha_close])
    return ha_open, ha_high, ha_low, ha_close


def _midpoint(high: np.ndarray, low: np.ndarray, period: int) -> np.ndarray:
    return (_rolling(high, period, np.max) + _rolling(low, period, np.min)) / 2.0


def ichimoku(bars, p_conv: int = 9, p_base: int = 26, p_span: int = 52):
    """
    Tenkan, Kijun, Senkou A and Senkou B, all stored at their computation index.
    The usual forward displacement of the spans is a charting convention and would
    leak future information into the state, so it is not applied.
    """
    p_conv = _require_int("p_conv", p_conv, 1)
    p_base = _require_int("p_base", p_base, 1)
    p_span = _require_int("p_span", p_span, 1)
    if not p_conv < p_base < p_span:
        raise InvalidParameterError(f"Ichimoku requires p_conv < p_base < p_span, got {p_conv}, {p_base}, {p_span}")
    _, h, l, _ = _ohlc(bars)
    tenkan = _midpoint(h, l, p_conv)
    kijun = _midpoint(h, l, p_base)
    senkou_a = (tenkan + kijun) / 2.0
    senkou_b = _midpoint(h, l, p_span)
    warmup = p_span - 1
    for line in (tenkan, kijun, senkou_a, senkou_b):
        line[:warmup] = np.nan
    return tenkan, kijun, senkou_a, senkou_b


# --- Volatility ---
def rolling_stddev(close, period: int) -> np.ndarray:
    """Population standard deviation over the trailing window."""
    period = _require_int("period", period, 2)
    return _rolling(_as_array(close), period, np.std)


def true_range(bars) -> np.ndarray:
    _, h, l, c = _ohlc(bars)
    tr = _nan_like(len(c))
    if len(c) > 1:
        prev_close = c[:-1]
        tr[1:] = np.maximum.reduce([h[1:] - l[1:], np.abs(h[1:] - prev_close), np.abs(l[1:] - prev_close)])
    return tr


def atr(bars, period: int) -> np.ndarray:
    """Wilder-smoothed true range; seeded with the mean of the first `period` true ranges."""
    period = _require_int("period", period, 1)
    tr = true_range(bars)
    out = _nan_like(len(tr))
    if len(tr) <= period:
        return out
    prev = tr[1:period + 1].mean()
    out[period] = prev
    for t in range(period + 1, len(tr)):
        prev = (prev * (period - 1) + tr[t]) / period
        out[t] = prev
    return out


def bollinger(close, period: int = 20, k: float = 2.0):
    if not k > 0:
        raise InvalidParameterError(f"Bollinger k must be > 0, got {k}")
    period = _require_int("period", period, 2)
    middle = sma(close, period)
    width = k * rolling_stddev(close, period)
    return middle, middle + width, middle - width


# --- Momentum ---
def _rsi_value(avg_gain: float, avg_loss: float) -> float:
    if avg_loss == 0.0:
        return 100.0 if avg_gain > 0.0 else 50.0
    if avg_gain == 0.0:
        return 0.0
    return 100.0 - 100.0 / (1.0 + avg_gain / avg_loss)


def rsi(close, period: int = 14) -> np.ndarray:
    period = _require_int("period", period, 1)
    x = _as_array(close)
    if len(x) < period + 1:
        raise InsufficientDataError(f"RSI_{period} needs at least {period + 1} values, got {len(x)}")
    delta = np.diff(x)
    gains = np.where(delta > 0, delta, 0.0)
    losses = np.where(delta < 0, -delta, 0.0)
    out = _nan_like(len(x))
    avg_gain = gains[:period].mean()
    avg_loss = losses[:period].mean()
    out[period] = _rsi_value(avg_gain, avg_loss)
    for t in range(period + 1, len(x)):
        avg_gain = (avg_gain * (period - 1) + gains[t - 1]) / period
        avg_loss = (avg_loss * (period - 1) + losses[t - 1]) / period
        out[t] = _rsi_value(avg_gain, avg_loss)
    return out


def macd(close, fast: int = 12, slow: int = 26, signal: int = 9):
    fast = _require_int("fast", fast, 1)
    slow = _require_int("slow", slow, 1)
    signal = _require_int("signal", signal, 1)
    if fast >= slow:
        raise InvalidParameterError(f"MACD requires fast < slow, got {fast} >= {slow}")
    x = _as_array(close)
    warmup = slow - 1 + signal - 1
    macd_line, signal_line = _nan_like(len(x)), _nan_like(len(x))
    if len(x) > warmup:
        macd_line = ema(x, fast) - ema(x, slow)
        signal_line[slow - 1:] = ema(macd_line[slow - 1:], signal)
        macd_line[:warmup] = np.nan
    histogram = macd_line - signal_line
    return macd_line, signal_line, histogram


def supertrend(bars, period: int = 10, multiplier: float = 3.0):
    """
    ATR trailing bands with the usual ratchet: a final band only moves when the
    new basic band tightens it or the previous close broke through it.
    Direction is +1 while price holds above the lower band, -1 below the upper band.
    """
    period = _require_int("period", period, 1)
    if not multiplier > 0:
        raise InvalidParameterError(f"SuperTrend multiplier must be > 0, got {multiplier}")
    _, h, l, c = _ohlc(bars)
    atr_values = atr(bars, period)
    hl2 = (h + l) / 2.0
    basic_upper = hl2 + multiplier * atr_values
    basic_lower = hl2 - multiplier * atr_values

    line, direction = _nan_like(len(c)), _nan_like(len(c))
    if len(c) <= period:
        return line, direction

    upper, lower = basic_upper[period], basic_lower[period]
    trend = 1.0 if c[period] >= hl2[period] else -1.0
    line[period] = lower if trend > 0 else upper
    direction[period] = trend
    for t in range(period + 1, len(c)):
        if basic_upper[t] < upper or c[t - 1] > upper:
            upper = basic_upper[t]
        if basic_lower[t] > lower or c[t - 1] < lower:
            lower = basic_lower[t]
        if trend < 0 and c[t] > upper:
            trend = 1.0
        elif trend > 0 and c[t] < lower:
            trend = -1.0
        line[t] = lower if trend > 0 else upper
        direction[t] = trend
    return line, direction


def stochastic(bars, k_period: int = 14, d_period: int = 3):
    """%K and its SMA %D; a window with zero high-low range reads 50."""
    k_period = _require_int("k_period", k_period, 1)
    d_period = _require_int("d_period", d_period, 1)
    _, h, l, c = _ohlc(bars)
    highest = _rolling(h, k_period, np.max)
    lowest = _rolling(l, k_period, np.min)
    span = highest - lowest
    with np.errstate(invalid="ignore", divide="ignore"):
        k_line = np.where(span > 0, 100.0 * (c - lowest) / span, 50.0)
    k_line[:k_period - 1] = np.nan
    d_line = _nan_like(len(c))
    valid = k_line[k_period - 1:]
    if len(valid) >= d_period:
        d_line[k_period - 1:] = _rolling(valid, d_period, np.mean)
    warmup = k_period - 1 + d_period - 1
    k_line[:warmup] = np.nan
    return k_line, d_line


# --- Indicator specs ---
def _fmt(value) -> str:
    return str(int(value)) if float(value).is_integer() else str(value)


@dataclass(frozen=True)
class _IndicatorKind:
    label: str
    family: str
    defaults: Dict[str, Any]
    warmup: Callable[[Dict[str, Any]], int]
    columns: Callable[[Dict[str, Any]], List[str]]
    compute: Callable[[Any, Dict[str, Any]], Sequence[np.ndarray]]


INDICATOR_KINDS: Dict[str, _IndicatorKind] = {
    "sma": _IndicatorKind(
        "SMA", "trend", {"period": 50},
        lambda p: p["period"] - 1,
        lambda p: [f"SMA_{_fmt(p['period'])}"],
        lambda b, p: [sma(b["close"], p["period"])]),
    "ema": _IndicatorKind(
        "EMA", "trend", {"period": 26},
        lambda p: p["period"] - 1,
        lambda p: [f"EMA_{_fmt(p['period'])}"],
        lambda b, p: [ema(b["close"], p["period"])]),
    "ha": _IndicatorKind(
        "HA", "trend", {},
        lambda p: 0,
        lambda p: ["HA_open", "HA_high", "HA_low", "HA_close"],
        lambda b, p: heiken_ashi(b)),
    "ichimoku": _IndicatorKind(
        "ICHIMOKU", "trend", {"p_conv": 9, "p_base": 26, "p_span": 52},
        lambda p: p["p_span"] - 1,
        lambda p: [f"ITS_{_fmt(p['p_conv'])}", f"IKS_{_fmt(p['p_base'])}",
                   f"ISA_{_fmt(p['p_conv'])}_{_fmt(p['p_base'])}", f"ISB_{_fmt(p['p_span'])}"],
        lambda b, p: ichimoku(b, p["p_conv"], p["p_base"], p["p_span"])),
    "stddev": _IndicatorKind(
        "STDDEV", "volatility", {"period": 20},
        lambda p: p["period"] - 1,
        lambda p: [f"STDDEV_{_fmt(p['period'])}"],
        lambda b, p: [rolling_stddev(b["close"], p["period"])]),
    "atr": _IndicatorKind(
        "ATR", "volatility", {"period": 10},
        lambda p: p["period"],
        lambda p: [f"ATR_{_fmt(p['period'])}"],
        lambda b, p: [atr(b, p["period"])]),
    "bbands": _IndicatorKind(
        "BBANDS", "volatility", {"period": 20, "k": 2.0},
        lambda p: p["period"] - 1,
        lambda p: [f"BB{side}_{_fmt(p['period'])}_{_fmt(p['k'])}" for side in ("M", "U", "L")],
        lambda b, p: bollinger(b["close"], p["period"], p["k"])),
    "rsi": _IndicatorKind(
        "RSI", "momentum", {"period": 14},
        lambda p: p["period"],
        lambda p: [f"RSI_{_fmt(p['period'])}"],
        lambda b, p: [rsi(b["close"], p["period"])]),
    "macd": _IndicatorKind(
        "MACD", "momentum", {"fast": 12, "slow": 26, "signal": 9},
        lambda p: p["slow"] - 1 + p["signal"] - 1,
        lambda p: [f"{prefix}_{_fmt(p['fast'])}_{_fmt(p['slow'])}_{_fmt(p['signal'])}"
                   for prefix in ("macd", "macds", "macdh")],
        lambda b, p: macd(b["close"], p["fast"], p["slow"], p["signal"])),
    "supertrend": _IndicatorKind(
        "SUPERTREND", "momentum", {"period": 10, "multiplier": 3.0},
        lambda p: p["period"],
        lambda p: [f"SUPERT_{_fmt(p['period'])}_{_fmt(p['multiplier'])}",
                   f"SUPERTd_{_fmt(p['period'])}_{_fmt(p['multiplier'])}"],
        lambda b, p: supertrend(b, p["period"], p["multiplier"])),
    "stoch": _IndicatorKind(
        "STOCH", "momentum", {"k_period": 14, "d_period": 3},
        lambda p: p["k_period"] - 1 + p["d_period"] - 1,
        lambda p: [f"STOCHk_{_fmt(p['k_period'])}", f"STOCHd_{_fmt(p['k_period'])}_{_fmt(p['d_period'])}"],
        lambda b, p: stochastic(b, p["k_period"], p["d_period"])),
}

DEFAULT_INDICATOR_KINDS = ["sma", "ema", "atr", "rsi", "stddev", "bbands", "macd", "ha", "ichimoku", "supertrend"]


@dataclass(frozen=True)
class IndicatorSpec:
    """One configured indicator: its kind plus parameter overrides of the kind's defaults."""
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in INDICATOR_KINDS:
            raise InvalidParameterError(f"unknown indicator kind {self.kind!r}; expected one of {sorted(INDICATOR_KINDS)}")
        defaults = INDICATOR_KINDS[self.kind].defaults
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise InvalidParameterError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        object.__setattr__(self, "params", {**defaults, **self.params})

    @property
    def name(self) -> str:
        label = INDICATOR_KINDS[self.kind].label
        values = [_fmt(v) for v in self.params.values()]
        return "_".join([label] + values)

    @property
    def family(self) -> str:
        return INDICATOR_KINDS[self.kind].family

    @property
    def warmup(self) -> int:
        return INDICATOR_KINDS[self.kind].warmup(self.params)

    @property
    def columns(self) -> List[str]:
        return INDICATOR_KINDS[self.kind].columns(self.params)

    def compute(self, bars: pd.DataFrame) -> List[np.ndarray]:
        return [np.asarray(out, dtype=np.float64) for out in INDICATOR_KINDS[self.kind].compute(bars, self.params)]

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IndicatorSpec":
        if "kind" not in data:
            raise InvalidParameterError(f"indicator entry lacks 'kind': {data}")
        return cls(kind=data["kind"], params=dict(data.get("params", {})))


def default_indicator_specs() -> List[IndicatorSpec]:
    return [IndicatorSpec(kind) for kind in DEFAULT_INDICATOR_KINDS]


@dataclass(frozen=True, eq=False)
class FeatureFrame:
    """Feature vectors per (time, asset): values has shape (T, N, F)."""
    tickers: Tuple[str, ...]
    calendar: pd.DatetimeIndex
    values: np.ndarray
    feature_names: Tuple[str, ...]
    warmup_dropped: int = 0

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    @property
    def feature_names_hash(self) -> str:
        return hashlib.sha256("|".join(self.feature_names).encode("utf-8")).hexdigest()

    def take(self, positions: np.ndarray) -> "FeatureFrame":
        return FeatureFrame(self.tickers, self.calendar[positions], self.values[positions].copy(),
                            self.feature_names, self.warmup_dropped)

    def with_values(self, values: np.ndarray) -> "FeatureFrame":
        return FeatureFrame(self.tickers, self.calendar, values, self.feature_names, self.warmup_dropped)

    def to_long_frame(self) -> pd.DataFrame:
        """One row per (date, ticker); used for the feature cache."""
        frames = []
        for i, ticker in enumerate(self.tickers):
            part = pd.DataFrame(self.values[:, i, :], columns=list(self.feature_names))
            part.insert(0, "ticker", ticker)
            part.insert(0, "date", self.calendar.strftime("%Y-%m-%d"))
            frames.append(part)
        return pd.concat(frames, ignore_index=True)

    @classmethod
    def from_long_frame(cls, frame: pd.DataFrame, warmup_dropped: int = 0) -> "FeatureFrame":
        tickers = tuple(pd.unique(frame["ticker"]))
        feature_names = tuple(c for c in frame.columns if c not in ("date", "ticker"))
        calendar = pd.DatetimeIndex(pd.to_datetime(frame.loc[frame["ticker"] == tickers[0], "date"]))
        values = np.stack(
            [frame.loc[frame["ticker"] == t, list(feature_names)].to_numpy(dtype=np.float64) for t in tickers],
            axis=1,
        )
        return cls(tickers, calendar, values, feature_names, warmup_dropped)


def build_feature_matrix(frame: "MarketFrame", specs: Sequence[IndicatorSpec]) -> FeatureFrame:
    """
    Concatenates OHLCV with every indicator output (in configured order) for each asset,
    then drops the largest warmup prefix so no undefined values remain.

    Args:
        frame (MarketFrame): A cleaned, calendar-aligned frame.
        specs (Sequence[IndicatorSpec]): Indicators to compute.

    Returns:
        FeatureFrame: Values of shape (T - max_warmup, N, 5 + indicator columns).
    """
    max_warmup = max((spec.warmup for spec in specs), default=0)
    n_steps = len(frame.calendar)
    if n_steps <= max_warmup:
        raise InsufficientDataError(
            f"series has {n_steps} rows but the indicator set needs more than {max_warmup} for warmup")

    feature_names = list(OHLCV_COLUMNS)
    for spec in specs:
        feature_names.extend(spec.columns)
    if len(set(feature_names)) != len(feature_names):
        raise InvalidParameterError("indicator specs produce duplicate feature names")

    per_asset = []
    for ticker in frame.tickers:
        bars = frame.series[ticker].bars
        columns = [bars[c].to_numpy(dtype=np.float64) for c in OHLCV_COLUMNS]
        for spec in specs:
            columns.extend(spec.compute(bars))
        per_asset.append(np.column_stack(columns))

    values = np.stack(per_asset, axis=1)[max_warmup:]
    if np.isnan(values).any():
        raise NumericalError("undefined feature values remain after warmup truncation")
    logger.info("Built %d features for %d assets; dropped %d warmup rows, %d rows remain",
                len(feature_names), len(frame.tickers), max_warmup, values.shape[0])
    return FeatureFrame(tuple(frame.tickers), frame.calendar[max_warmup:], values,
                        tuple(feature_names), max_warmup)
