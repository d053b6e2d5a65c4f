"""
Multi-asset trading MDP on daily closes.

PortfolioAccount is the single place where cash, whole-share positions and fees
change; the environment and every rule-based strategy trade through it.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from backend.components.config import EnvConfig
from backend.components.errors import (
    DimensionError,
    EnvironmentStateError,
    InvalidParameterError,
)
from backend.components.indicators import FeatureFrame

logger = logging.getLogger(__name__)

BUY, SELL, HOLD = "buy", "sell", "hold"
TRADE_LOG_COLUMNS = ["t", "date", "asset", "op", "shares", "price", "fee", "cash_after", "equity_after"]


def decode_action(code: int, n_assets: int) -> List[str]:
    """Bit i of the code selects asset i's operation: 1 = buy, 0 = sell."""
    if int(code) != code or not 0 <= code < 2 ** n_assets:
        raise EnvironmentStateError(f"action code {code} outside [0, {2 ** n_assets}) for {n_assets} assets")
    code = int(code)
    return [BUY if (code >> i) & 1 else SELL for i in range(n_assets)]


def encode_action(ops: Sequence[str]) -> int:
    code = 0
    for i, op in enumerate(ops):
        if op == BUY:
            code |= 1 << i
        elif op != SELL:
            raise InvalidParameterError(f"only buy/sell are encodable, got {op!r}")
    return code


@dataclass(frozen=True)
class PortfolioState:
    cash: float
    positions: Tuple[int, ...]
    equity: float


@dataclass(frozen=True)
class TradeRecord:
    t: int
    date: str
    asset: str
    op: str
    shares: int
    price: float
    fee: float
    cash_after: float
    equity_after: float


@dataclass
class ExecutionReport:
    trades: List[TradeRecord] = field(default_factory=list)
    fees: float = 0.0
    invalid_count: int = 0


class PortfolioAccount:
    """
    Cash and integer share positions under the environment's sizing rules:
    a buy spends buy_fraction of the cash held before this step's trades,
    a sell disposes of floor(position * sell_fraction) shares.
    """
    def __init__(self, config: EnvConfig, tickers: Sequence[str]):
        self.config = config
        self.tickers = tuple(tickers)
        self.trade_log: List[TradeRecord] = []
        self.reset()

    def reset(self) -> None:
        self.cash = float(self.config.initial_capital)
        self.positions = np.zeros(len(self.tickers), dtype=np.int64)
        self.trade_log = []

    def equity(self, prices: np.ndarray) -> float:
        return float(self.cash + np.dot(self.positions, prices))

    def snapshot(self, prices: np.ndarray) -> PortfolioState:
        return PortfolioState(self.cash, tuple(int(p) for p in self.positions), self.equity(prices))

    def execute(self, ops: Sequence[str], prices: np.ndarray, t: int, date: str) -> ExecutionReport:
        """
        Applies one step's per-asset ops at the given prices in ascending asset order.

        Args:
            ops (Sequence[str]): One of buy/sell/hold per asset.
            prices (np.ndarray): Execution prices (same-day closes), one per asset.
            t (int): Time index recorded in the trade log.
            date (str): Date recorded in the trade log.

        Returns:
            ExecutionReport: Executed trades, fees paid and the invalid sub-action count.
        """
        if len(ops) != len(self.tickers):
            raise DimensionError(f"expected {len(self.tickers)} ops, got {len(ops)}")
        report = ExecutionReport()
        fee_rate = self.config.fee_rate
        cash_at_decision = self.cash
        for i, op in enumerate(ops):
            price = float(prices[i])
            if op == HOLD:
                continue
            if op == BUY:
                shares = math.floor(cash_at_decision * self.config.buy_fraction / price)
                requested = shares
                if shares > 0 and shares * price * (1.0 + fee_rate) > self.cash:
                    shares = min(shares, math.floor(self.cash / (price * (1.0 + fee_rate))))
                cost = shares * price
                fee = cost * fee_rate
                while shares > 0 and cost + fee > self.cash:
                    shares -= 1
                    cost = shares * price
                    fee = cost * fee_rate
                if shares == 0:
                    report.invalid_count += 1
                    continue
                if shares < requested:
                    logger.debug("Buy of %s truncated from %d to %d shares by remaining cash",
                                 self.tickers[i], requested, shares)
                self.cash -= cost + fee
                self.positions[i] += shares
            elif op == SELL:
                shares = math.floor(int(self.positions[i]) * self.config.sell_fraction)
                if shares == 0:
                    continue
                cost = shares * price
                fee = cost * fee_rate
                self.cash += cost - fee
                self.positions[i] -= shares
            else:
                raise InvalidParameterError(f"unknown op {op!r}")
            report.fees += fee
            record = TradeRecord(t, date, self.tickers[i], op, int(shares), price, fee,
                                 self.cash, self.equity(prices))
            report.trades.append(record)
            self.trade_log.append(record)
        return report

    def trade_log_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(r) for r in self.trade_log], columns=TRADE_LOG_COLUMNS)


@dataclass(frozen=True, eq=False)
class MarketState:
    window: np.ndarray  # (W, N, F), oldest row first
    portfolio: PortfolioState
    t: int
    cash_fraction: float
    position_fractions: np.ndarray

    def as_vector(self) -> np.ndarray:
        """Flattened window followed by cash and per-asset position weights of equity."""
        return np.concatenate([self.window.ravel(), [self.cash_fraction], self.position_fractions])


@dataclass(frozen=True, eq=False)
class StepResult:
    next_state: MarketState
    reward: float
    done: bool
    info: Dict[str, Any]


class TradingEnv:
    """
    Multi-asset trading MDP: 2^N joint buy/sell actions, execution at the
    decision-day close, reward from the next close.

    Reward = (equity_{t+1} - equity_t) / initial_capital - invalid_penalty * invalid_count.
    """
    def __init__(self, config: EnvConfig, features: FeatureFrame, prices):
        if tuple(features.tickers) != tuple(prices.tickers):
            raise DimensionError("feature and price frames cover different tickers")
        if not features.calendar.equals(prices.calendar):
            raise DimensionError("feature and price calendars are not aligned")
        self.config = config
        self.features = features
        self.tickers = tuple(features.tickers)
        self.closes = prices.close_matrix()
        self.dates = features.calendar.strftime("%Y-%m-%d")
        self.account = PortfolioAccount(config, self.tickers)
        self.seed: Optional[int] = None
        self._t = -1
        self._start = -1
        self._end = -1
        self._done = True

    @property
    def n_assets(self) -> int:
        return len(self.tickers)

    @property
    def n_actions(self) -> int:
        return 2 ** self.n_assets

    @property
    def state_size(self) -> int:
        return self.config.window * self.n_assets * self.features.n_features + self.n_assets + 1

    @property
    def done(self) -> bool:
        return self._done

    @property
    def t(self) -> int:
        return self._t

    @property
    def start(self) -> int:
        return self._start

    @property
    def end(self) -> int:
        return self._end

    def valid_starts(self) -> range:
        """Episode starts that leave a full window behind and, when possible, a full episode ahead."""
        first = self.config.window - 1
        last = len(self.dates) - 2
        if last < first:
            raise EnvironmentStateError(f"{len(self.dates)} dates cannot hold a window of {self.config.window} plus one step")
        horizon = self.config.episode_length
        if horizon is not None and len(self.dates) - 1 - horizon >= first:
            last = len(self.dates) - 1 - horizon
        return range(first, last + 1)

    def reset(self, start: int, seed: Optional[int] = None) -> MarketState:
        """
        Starts an episode at index `start` with full cash and no positions.

        Args:
            start (int): First decision index; needs start >= W - 1 and one further day.
            seed (Optional[int]): Recorded for provenance; execution itself is deterministic.

        Returns:
            MarketState: The window over [start - W + 1, start].
        """
        window = self.config.window
        last = len(self.dates) - 1
        if start < window - 1:
            raise EnvironmentStateError(f"start {start} too early for a window of {window}")
        if start >= last:
            raise EnvironmentStateError(f"start {start} leaves no step before the last index {last}")
        self.seed = seed
        self.account.reset()
        self._start = start
        self._t = start
        horizon = self.config.episode_length
        self._end = last if horizon is None else min(start + horizon, last)
        self._done = False
        return self.observe()

    def observe(self) -> MarketState:
        if self._t < 0:
            raise EnvironmentStateError("environment has not been reset")
        lo = self._t - self.config.window + 1
        window = self.features.values[lo:self._t + 1].copy()
        prices = self.closes[self._t]
        portfolio = self.account.snapshot(prices)
        if portfolio.equity > 0:
            cash_fraction = portfolio.cash / portfolio.equity
            position_fractions = self.account.positions * prices / portfolio.equity
        else:
            cash_fraction, position_fractions = 0.0, np.zeros(self.n_assets)
        return MarketState(window, portfolio, self._t, float(cash_fraction),
                           np.asarray(position_fractions, dtype=np.float64))

    def equity(self) -> float:
        return self.account.equity(self.closes[self._t])

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EnvironmentStateError("episode is finished; call reset() before stepping")
        return self.step_ops(decode_action(action, self.n_assets))

    def step_ops(self, ops: Sequence[str]) -> StepResult:
        """Executes per-asset buy/sell/hold ops at the current close and advances one day."""
        if self._done:
            raise EnvironmentStateError("episode is finished; call reset() before stepping")
        t = self._t
        equity_before = self.account.equity(self.closes[t])
        report = self.account.execute(ops, self.closes[t], t, self.dates[t])
        self._t = t + 1
        equity_after = self.account.equity(self.closes[self._t])
        reward = ((equity_after - equity_before) / self.config.initial_capital
                  - self.config.invalid_penalty * report.invalid_count)
        self._done = self._t >= self._end
        info = {
            "trades": report.trades,
            "fees": report.fees,
            "invalid_count": report.invalid_count,
            "equity": equity_after,
        }
        return StepResult(self.observe(), float(reward), self._done, info)

    def trade_log_frame(self) -> pd.DataFrame:
        return self.account.trade_log_frame()
