import math
import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from backend.components.errors import InsufficientDataError, InvalidParameterError, PeriodMismatchError

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
REPORT_COLUMNS = ["Year", "Strategy", "Return_Rate", "Sharpe_Ratio", "Volatility", "Max_Drawdown"]


@dataclass(frozen=True, eq=False)
class EquityCurve:
    dates: pd.DatetimeIndex
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or len(values) == 0:
            raise InvalidParameterError("an equity curve needs at least one value")
        if len(self.dates) != len(values):
            raise InvalidParameterError(f"{len(self.dates)} dates for {len(values)} equity values")
        object.__setattr__(self, "values", values)

    @property
    def returns(self) -> np.ndarray:
        return self.values[1:] / self.values[:-1] - 1.0

    @property
    def period(self) -> Tuple[str, str]:
        return self.dates[0].strftime("%Y-%m-%d"), self.dates[-1].strftime("%Y-%m-%d")

    def to_frame(self, label: str = "equity") -> pd.DataFrame:
        return pd.DataFrame({"date": self.dates.strftime("%Y-%m-%d"), label: self.values})


CurveLike = Union[EquityCurve, Sequence[float], np.ndarray]


def _values(curve: CurveLike) -> np.ndarray:
    if isinstance(curve, EquityCurve):
        return curve.values
    return np.asarray(curve, dtype=np.float64)


def _returns(curve: CurveLike) -> np.ndarray:
    values = _values(curve)
    if len(values) < 3:
        raise InsufficientDataError("at least two returns are needed")
    return values[1:] / values[:-1] - 1.0


def total_return(curve: CurveLike) -> float:
    """100 * (P_end - P_start) / P_start."""
    values = _values(curve)
    if values[0] <= 0:
        raise InvalidParameterError(f"starting equity must be positive, got {values[0]}")
    return 100.0 * (values[-1] - values[0]) / values[0]


def _return_std(returns: np.ndarray) -> float:
    std = float(np.std(returns, ddof=1))
    # Constant returns leave rounding noise in the sample std
    if std <= 1e-12 * max(1.0, abs(float(np.mean(returns)))):
        return 0.0
    return std


def sharpe_is_degenerate(curve: CurveLike) -> bool:
    return _return_std(_returns(curve)) == 0.0


def sharpe(curve: CurveLike) -> float:
    """Annualized mean/std of daily returns with zero risk-free rate; 0 when std is 0."""
    returns = _returns(curve)
    std = _return_std(returns)
    if std == 0.0:
        return 0.0
    return float(np.mean(returns)) / std * math.sqrt(TRADING_DAYS)


def volatility(curve: CurveLike) -> float:
    """Annualized sample std of daily returns, in percent."""
    return _return_std(_returns(curve)) * math.sqrt(TRADING_DAYS) * 100.0


def max_drawdown(curve: CurveLike) -> float:
    """Largest peak-to-trough decline as a signed percent (<= 0)."""
    values = _values(curve)
    peaks = np.maximum.accumulate(values)
    worst = float(np.max((peaks - values) / peaks))
    return 0.0 - 100.0 * worst if worst > 0 else 0.0


@dataclass(frozen=True)
class AssetMetrics:
    return_rate: float
    sharpe_ratio: float
    volatility: float
    max_drawdown: float
    degenerate_sharpe: bool = False

    @classmethod
    def from_curve(cls, curve: CurveLike) -> "AssetMetrics":
        return cls(total_return(curve), sharpe(curve), volatility(curve), max_drawdown(curve),
                   sharpe_is_degenerate(curve))


def _mean(values: Sequence[float]) -> float:
    # fsum keeps the mean independent of input order
    return math.fsum(values) / len(values)


def mean_metrics(items: Sequence[AssetMetrics]) -> AssetMetrics:
    return AssetMetrics(
        _mean([m.return_rate for m in items]),
        _mean([m.sharpe_ratio for m in items]),
        _mean([m.volatility for m in items]),
        _mean([m.max_drawdown for m in items]),
        any(m.degenerate_sharpe for m in items),
    )


@dataclass
class MetricsReport:
    per_asset: Dict[str, AssetMetrics]
    portfolio: AssetMetrics
    period: Tuple[str, str]
    pooled: Optional[AssetMetrics] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def degenerate_flags(self) -> List[str]:
        return sorted(label for label, m in self.per_asset.items() if m.degenerate_sharpe)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "period": list(self.period),
            "metadata": self.metadata,
            "portfolio": asdict(self.portfolio),
            "pooled": asdict(self.pooled) if self.pooled else None,
            "per_asset": {label: asdict(m) for label, m in sorted(self.per_asset.items())},
            "degenerate_sharpe": self.degenerate_flags,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        return cls(
            per_asset={label: AssetMetrics(**m) for label, m in data["per_asset"].items()},
            portfolio=AssetMetrics(**data["portfolio"]),
            period=tuple(data["period"]),
            pooled=AssetMetrics(**data["pooled"]) if data.get("pooled") else None,
            metadata=dict(data.get("metadata", {})),
        )

    def table_row(self, strategy: Optional[str] = None, year: Optional[str] = None) -> Dict[str, Any]:
        """One row in the comparison-table schema, rounded to 2 decimals."""
        return table_row(
            self.portfolio,
            strategy if strategy is not None else self.metadata.get("strategy", ""),
            year if year is not None else self.metadata.get("year", period_label(self.period)),
        )


def table_row(metrics: AssetMetrics, strategy: str, year: str) -> Dict[str, Any]:
    return {
        "Year": str(year),
        "Strategy": strategy,
        "Return_Rate": round(metrics.return_rate, 2),
        "Sharpe_Ratio": round(metrics.sharpe_ratio, 2),
        "Volatility": round(metrics.volatility, 2),
        "Max_Drawdown": round(metrics.max_drawdown, 2),
    }


def period_label(period: Tuple[str, str]) -> str:
    start, end = period[0][:4], period[1][:4]
    return start if start == end else f"{start}-{end}"


def evaluate_curves(curves: Dict[str, EquityCurve], metadata: Optional[Dict[str, Any]] = None) -> MetricsReport:
    """
    Per-curve metrics, their arithmetic mean as the portfolio figure, and the
    metrics of the pooled (summed) curve.
    """
    if not curves:
        raise InsufficientDataError("no equity curves to evaluate")
    periods = {c.period for c in curves.values()}
    if len(periods) != 1:
        raise PeriodMismatchError(f"curves cover different periods: {sorted(periods)}")
    per_asset = {label: AssetMetrics.from_curve(curve) for label, curve in curves.items()}
    first = next(iter(curves.values()))
    pooled_values = np.sum([c.values for c in curves.values()], axis=0)
    pooled = AssetMetrics.from_curve(EquityCurve(first.dates, pooled_values))
    return MetricsReport(per_asset, mean_metrics(list(per_asset.values())), first.period,
                         pooled, dict(metadata or {}))


def _merge_metadata(items: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    merged: Dict[str, Any] = {}
    keys = sorted({k for m in items for k in m})
    for key in keys:
        values = [m.get(key) for m in items if key in m]
        distinct = sorted({json_key(v) for v in values})
        merged[key] = values[0] if len(distinct) == 1 else distinct
    return merged


def json_key(value: Any) -> str:
    return value if isinstance(value, str) else repr(value)


def aggregate(reports: Sequence[MetricsReport], across_seeds: bool = False) -> MetricsReport:
    """
    Arithmetic mean across reports covering the same period.

    Args:
        reports (Sequence[MetricsReport]): Per-asset reports, or with across_seeds
            one report per seed over the same asset labels.
        across_seeds (bool): Average each asset's metrics over the seeds instead of
            collecting disjoint assets.

    Returns:
        MetricsReport: Portfolio figures are the mean of the per-asset figures.
    """
    if not reports:
        raise InsufficientDataError("aggregate needs at least one report")
    periods = {tuple(r.period) for r in reports}
    if len(periods) != 1:
        raise PeriodMismatchError(f"reports cover different periods: {sorted(periods)}")
    per_asset: Dict[str, AssetMetrics] = {}
    if across_seeds:
        labels = list(reports[0].per_asset)
        for report in reports[1:]:
            if sorted(report.per_asset) != sorted(labels):
                raise InvalidParameterError(f"seed reports cover different assets: {sorted(labels)} "
                                            f"vs {sorted(report.per_asset)}")
        for label in labels:
            per_asset[label] = mean_metrics([r.per_asset[label] for r in reports])
    else:
        for report in reports:
            for label, metrics in report.per_asset.items():
                if label in per_asset:
                    raise InvalidParameterError(f"asset {label!r} appears in more than one report")
                per_asset[label] = metrics
    pooled = None
    if all(r.pooled is not None for r in reports):
        pooled = mean_metrics([r.pooled for r in reports])
    return MetricsReport(per_asset, mean_metrics(list(per_asset.values())), reports[0].period,
                         pooled, _merge_metadata([r.metadata for r in reports]))


def report_table(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """Comparison table grouped by year, then sorted by strategy name."""
    table = pd.DataFrame(list(rows), columns=REPORT_COLUMNS)
    table["Year"] = table["Year"].astype(str)
    return table.sort_values(["Year", "Strategy"], kind="mergesort").reset_index(drop=True)
