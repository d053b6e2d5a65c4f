"""
Rule-based comparison strategies: random, moving-average crossover,
equal-weight index tracking, ARIMA(p,1,0) signals and an all-hold dummy.

Every strategy only emits per-asset buy/sell/hold ops; the cash arithmetic
happens in trading_env.PortfolioAccount, the same engine the RL agent trades through.
"""
import re
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from backend.components.config import EnvConfig, StrategyConfig
from backend.components.data_loader import MarketFrame
from backend.components.errors import (
    InsufficientDataError,
    InvalidParameterError,
    SingularDesignError,
)
from backend.components.indicators import sma
from backend.components.metrics import EquityCurve
from backend.components.trading_env import BUY, HOLD, SELL, TRADE_LOG_COLUMNS, PortfolioAccount

logger = logging.getLogger(__name__)

SIGNALS = (BUY, SELL, HOLD)


# --- Signal generators ---
def random_strategy(n_steps: int, n_assets: int, probs: Sequence[float] = (0.2, 0.2, 0.6),
                    seed: int = 42) -> np.ndarray:
    """
    I.i.d. per-asset, per-day draws of buy/sell/hold.

    Args:
        n_steps (int): Number of days.
        n_assets (int): Number of assets.
        probs (Sequence[float]): (buy, sell, hold) probabilities summing to 1.
        seed (int): Generator seed.

    Returns:
        np.ndarray: (n_steps, n_assets) array of signals.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (3,) or not np.isfinite(p).all() or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidParameterError(f"probabilities must be three nonnegative values summing to 1, got {list(probs)}")
    rng = np.random.default_rng(seed)
    draws = rng.choice(3, size=(n_steps, n_assets), p=p / p.sum())
    return np.asarray(SIGNALS, dtype=object)[draws]


def ma_crossover(close, period: int) -> np.ndarray:
    """
    Crossover events of close against SMA_period.

    Buy when close moves above the average, sell when it moves below; a touch
    (close == SMA) keeps the previous side. The warmup is `period`: a cross needs
    the average on the previous day too, so indices 0..period-1 hold and index
    `period` reports the side the series starts on.
    """
    close = np.asarray(close, dtype=np.float64)
    if period < 2:
        raise InvalidParameterError(f"MA period must be >= 2, got {period}")
    if len(close) < period + 1:
        raise InsufficientDataError(f"MA({period}) needs at least {period + 1} closes, got {len(close)}")
    average = sma(close, period)
    signals = np.full(len(close), HOLD, dtype=object)
    side = 0
    for t in range(period, len(close)):
        regime = int(np.sign(close[t] - average[t]))
        if regime != 0 and regime != side:
            signals[t] = BUY if regime > 0 else SELL
            side = regime
    return signals


def rebalance_mask(calendar: pd.DatetimeIndex) -> np.ndarray:
    """First trading day of Jan/Apr/Jul/Oct plus the last trading day of each December."""
    if len(calendar) == 0:
        raise InsufficientDataError("empty calendar")
    months = calendar.month.to_numpy()
    month_ids = calendar.year.to_numpy() * 12 + months
    first_of_month = np.r_[True, month_ids[1:] != month_ids[:-1]]
    last_of_month = np.r_[month_ids[:-1] != month_ids[1:], True]
    quarter_start = first_of_month & np.isin(months, (1, 4, 7, 10))
    year_end = last_of_month & (months == 12)
    return quarter_start | year_end


def index_tracking(account: PortfolioAccount, closes: np.ndarray, band: float = 0.02) -> List[str]:
    """
    Equal-weight rebalancing ops for one rebalance date.

    Weights are each asset's share of the invested value. With nothing invested
    every asset is bought; otherwise assets below 1/N - band are bought and
    assets above 1/N + band are sold.
    """
    n = len(account.tickers)
    if n == 0:
        raise InsufficientDataError("index tracking needs at least one asset")
    values = account.positions * closes
    invested = float(values.sum())
    if invested <= 0:
        return [BUY] * n
    target = 1.0 / n
    ops = []
    for weight in values / invested:
        if weight < target - band:
            ops.append(BUY)
        elif weight > target + band:
            ops.append(SELL)
        else:
            ops.append(HOLD)
    return ops


@dataclass(frozen=True, eq=False)
class ArModel:
    """AR(p) on first differences: dc_t = intercept + sum_k coefficients[k] * dc_{t-1-k}."""
    order: int
    coefficients: np.ndarray
    intercept: float
    residual_variance: float
    std_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    difference_order: int = 1

    def predict_change(self, recent_closes) -> float:
        closes = np.asarray(recent_closes, dtype=np.float64)
        if len(closes) < self.order + 1:
            raise InsufficientDataError(f"AR({self.order}) forecast needs {self.order + 1} closes, got {len(closes)}")
        lags = np.diff(closes[-(self.order + 1):])[::-1]
        return float(self.intercept + np.dot(self.coefficients, lags))

    def forecast(self, recent_closes) -> float:
        return float(recent_closes[-1]) + self.predict_change(recent_closes)


def fit_ar(diff_close, p: int = 5) -> ArModel:
    """
    Ordinary least squares fit of dc_t on (dc_{t-1}, ..., dc_{t-p}, 1).

    Args:
        diff_close: First-differenced closes, oldest first.
        p (int): Autoregressive order.

    Returns:
        ArModel: Coefficients, intercept, residual variance and standard errors.
    """
    y_all = np.asarray(diff_close, dtype=np.float64)
    if len(y_all) < 10 * p:
        raise InsufficientDataError(f"AR({p}) fit needs at least {10 * p} differences, got {len(y_all)}")
    if not np.any(y_all):
        return ArModel(p, np.zeros(p), 0.0, 0.0, np.zeros(p + 1))

    n = len(y_all) - p
    lags = np.column_stack([y_all[p - k - 1:p - k - 1 + n] for k in range(p)])
    design = np.column_stack([lags, np.ones(n)])
    y = y_all[p:]
    if np.linalg.matrix_rank(design) < p + 1:
        raise SingularDesignError(f"AR({p}) design matrix is singular; use a longer or less regular window")
    beta, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    residuals = y - design @ beta
    dof = max(n - (p + 1), 1)
    residual_variance = float(residuals @ residuals / dof)
    covariance = residual_variance * np.linalg.inv(design.T @ design)
    std_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    return ArModel(p, beta[:p].copy(), float(beta[p]), residual_variance, std_errors)


def arima_signal(model: ArModel, recent_closes, threshold: float = 0.005) -> str:
    closes = np.asarray(recent_closes, dtype=np.float64)
    current = closes[-1]
    change = (model.forecast(closes) - current) / current
    if change > threshold:
        return BUY
    if change < -threshold:
        return SELL
    return HOLD


# --- Strategies ---
class RuleBasedStrategy:
    """
    Base class: prepare() precomputes a (T, N) signal matrix over the frame,
    decide() returns the ops for the requested assets at day t.
    """
    name = "rule"
    joint = False

    def __init__(self):
        self.signals: Optional[np.ndarray] = None

    def describe(self) -> Dict[str, Any]:
        return {"strategy": self.name}

    def prepare(self, frame: MarketFrame, start: int) -> None:
        self.signals = self.compute_signals(frame, start)

    def compute_signals(self, frame: MarketFrame, start: int) -> np.ndarray:
        raise NotImplementedError

    def decide(self, t: int, asset_ids: Sequence[int], account: PortfolioAccount, closes: np.ndarray) -> List[str]:
        return [self.signals[t, i] for i in asset_ids]


class HoldStrategy(RuleBasedStrategy):
    name = "hold"

    def compute_signals(self, frame: MarketFrame, start: int) -> np.ndarray:
        return np.full((len(frame.calendar), len(frame.tickers)), HOLD, dtype=object)


class RandomStrategy(RuleBasedStrategy):
    name = "random"

    def __init__(self, probs: Sequence[float] = (0.2, 0.2, 0.6), seed: int = 42):
        super().__init__()
        self.probs = tuple(probs)
        self.seed = seed

    def describe(self) -> Dict[str, Any]:
        return {"strategy": self.name, "probs": list(self.probs), "seed": self.seed}

    def compute_signals(self, frame: MarketFrame, start: int) -> np.ndarray:
        signals = np.full((len(frame.calendar), len(frame.tickers)), HOLD, dtype=object)
        signals[start:] = random_strategy(len(frame.calendar) - start, len(frame.tickers), self.probs, self.seed)
        return signals


class MovingAverageStrategy(RuleBasedStrategy):
    def __init__(self, period: int):
        super().__init__()
        self.period = period
        self.name = f"ma_{period}"

    def describe(self) -> Dict[str, Any]:
        return {"strategy": self.name, "period": self.period}

    def compute_signals(self, frame: MarketFrame, start: int) -> np.ndarray:
        closes = frame.close_matrix()
        return np.column_stack([ma_crossover(closes[:, i], self.period) for i in range(closes.shape[1])])


class IndexTrackingStrategy(RuleBasedStrategy):
    """One joint account rebalanced toward equal value weights on the rebalance calendar."""
    name = "index_tracking"
    joint = True

    def __init__(self, band: float = 0.02):
        super().__init__()
        self.band = band
        self.rebalance: Optional[np.ndarray] = None

    def describe(self) -> Dict[str, Any]:
        return {"strategy": self.name, "band": self.band}

    def prepare(self, frame: MarketFrame, start: int) -> None:
        if not frame.tickers:
            raise InsufficientDataError("index tracking needs a non-empty frame")
        self.rebalance = rebalance_mask(frame.calendar)
        # The first decision day always rebalances so the account is invested from the start
        self.rebalance[start] = True

    def decide(self, t: int, asset_ids: Sequence[int], account: PortfolioAccount, closes: np.ndarray) -> List[str]:
        if not self.rebalance[t]:
            return [HOLD] * len(asset_ids)
        return index_tracking(account, closes[t, list(asset_ids)], self.band)


class ArimaStrategy(RuleBasedStrategy):
    """ARIMA(p,1,0) forecasts refit every `refit_every` days on a trailing window of closes."""
    name = "arima"

    def __init__(self, order: int = 5, threshold: float = 0.005, refit_every: int = 20, window: int = 504):
        super().__init__()
        self.order = order
        self.threshold = threshold
        self.refit_every = refit_every
        self.window = window

    def describe(self) -> Dict[str, Any]:
        return {"strategy": self.name, "order": [self.order, 1, 0], "threshold": self.threshold,
                "refit_every": self.refit_every, "window": self.window}

    def _signals_for(self, close: np.ndarray, start: int) -> np.ndarray:
        signals = np.full(len(close), HOLD, dtype=object)
        model: Optional[ArModel] = None
        for t in range(start, len(close)):
            if (t - start) % self.refit_every == 0:
                history = close[max(0, t - self.window):t + 1]
                try:
                    model = fit_ar(np.diff(history), self.order)
                except (InsufficientDataError, SingularDesignError) as e:
                    logger.warning("ARIMA refit at index %d skipped: %s", t, e)
            if model is not None and t >= self.order:
                signals[t] = arima_signal(model, close[:t + 1], self.threshold)
        return signals

    def compute_signals(self, frame: MarketFrame, start: int) -> np.ndarray:
        closes = frame.close_matrix()
        return np.column_stack([self._signals_for(closes[:, i], start) for i in range(closes.shape[1])])


def make_strategy(name: str, config: StrategyConfig, seed: int = 42) -> RuleBasedStrategy:
    """Builds a strategy from its CLI name: random, ma_<T>, index_tracking, arima or hold."""
    match = re.fullmatch(r"ma_(\d+)", name)
    if match:
        return MovingAverageStrategy(int(match.group(1)))
    if name == "random":
        return RandomStrategy(config.random_probs, seed)
    if name == "index_tracking":
        return IndexTrackingStrategy(config.index_band)
    if name == "arima":
        return ArimaStrategy(config.arima_order, config.arima_threshold, config.arima_refit_every, config.arima_window)
    if name == "hold":
        return HoldStrategy()
    raise InvalidParameterError(f"unknown strategy {name!r}")


@dataclass
class BacktestResult:
    curves: Dict[str, EquityCurve]
    trade_log: pd.DataFrame
    description: Dict[str, Any] = field(default_factory=dict)


def _run_account(strategy: RuleBasedStrategy, account: PortfolioAccount, asset_ids: List[int],
                 closes: np.ndarray, dates: pd.Index, start: int) -> np.ndarray:
    prices = closes[:, asset_ids]
    equities = [account.equity(prices[start])]
    for t in range(start, len(dates) - 1):
        ops = strategy.decide(t, asset_ids, account, closes)
        account.execute(ops, prices[t], t, dates[t])
        equities.append(account.equity(prices[t + 1]))
    return np.asarray(equities)


def run_rule_based(strategy: RuleBasedStrategy, env_config: EnvConfig, frame: MarketFrame,
                   start: int = 0) -> BacktestResult:
    """
    Executes a strategy's signals from `start` to the end of the frame.

    Per-asset strategies trade each asset in its own account with the full
    initial capital; joint strategies trade one account over all assets.
    Ops decided at day t fill at close t and are valued at close t + 1.

    Args:
        strategy (RuleBasedStrategy): The strategy to run.
        env_config (EnvConfig): Capital, fee and sizing rules.
        frame (MarketFrame): Prices, including any history the strategy needs before `start`.
        start (int): Index of the first decision day; the curves begin there.

    Returns:
        BacktestResult: Equity curves keyed by asset (or 'portfolio') and the combined trade log.
    """
    n_dates = len(frame.calendar)
    if not 0 <= start < n_dates - 1:
        raise InsufficientDataError(f"start {start} leaves no trading day in a frame of {n_dates} dates")
    strategy.prepare(frame, start)
    closes = frame.close_matrix()
    dates = frame.calendar.strftime("%Y-%m-%d")
    curve_dates = frame.calendar[start:]
    curves: Dict[str, EquityCurve] = {}
    logs: List[pd.DataFrame] = []

    if strategy.joint:
        account = PortfolioAccount(env_config, frame.tickers)
        values = _run_account(strategy, account, list(range(len(frame.tickers))), closes, dates, start)
        curves["portfolio"] = EquityCurve(curve_dates, values)
        logs.append(account.trade_log_frame())
    else:
        for i, ticker in enumerate(frame.tickers):
            account = PortfolioAccount(env_config, [ticker])
            curves[ticker] = EquityCurve(curve_dates, _run_account(strategy, account, [i], closes, dates, start))
            logs.append(account.trade_log_frame())

    trade_log = pd.concat(logs, ignore_index=True) if logs else pd.DataFrame(columns=TRADE_LOG_COLUMNS)
    trade_log = trade_log.sort_values(["t", "asset"], kind="mergesort").reset_index(drop=True)
    logger.info("%s: %d trades over %d days", strategy.name, len(trade_log), n_dates - start)
    return BacktestResult(curves, trade_log, strategy.describe())
