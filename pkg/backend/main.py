import os
import sys
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

# Add project root to Python path to ensure imports work correctly
# This assumes the script is run from the project root or a subdirectory
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from backend.components.config import ExperimentConfig
from backend.components.data_loader import (
    DataLoader,
    MarketFrame,
    NormStats,
    clean,
    compute_norm_stats,
    data_fingerprint,
    load_ohlcv,
    split_by_date,
    zscore,
)
from backend.components.errors import (
    CheckpointMismatchError,
    EmptySplitError,
    InsufficientDataError,
    MissingArtifactError,
    TrainingAbortedError,
)
from backend.components.indicators import build_feature_matrix
from backend.components.metrics import EquityCurve, MetricsReport, aggregate, evaluate_curves, period_label, report_table
from backend.components.trading_env import TradingEnv
from backend.agents.a2c_agent import A2CAgent
from backend.agents.baseline_agent import make_strategy, run_rule_based

logger = logging.getLogger(__name__)

STRATEGY_NAMES = ["a2c", "random", "index_tracking", "arima", "hold"]


def strategy_names(config: ExperimentConfig) -> List[str]:
    """Every strategy a full comparison runs; the MA variants come from strategies.ma_periods."""
    ma = [f"ma_{period}" for period in config.strategies.ma_periods]
    return ["a2c", "random", *ma, "index_tracking", "arima", "hold"]


class TradingResearchBackend:
    """
    Main backend class for the research pipeline.
    Orchestrates ingest -> features -> train -> backtest -> report; each stage
    reads only the previous stage's cache in the run directory.
    """
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.config_hash = config.config_hash()
        self.data_loader = DataLoader(config.output_dir)

    # --- Helpers ---
    def _provenance(self, manifest: Dict[str, Any]) -> Dict[str, str]:
        return {"config_hash": self.config_hash, "data_fingerprint": manifest.get("data_fingerprint", "")}

    def train_run_dir(self, seed: Optional[int] = None) -> str:
        seed = self.config.a2c.seed if seed is None else seed
        return os.path.join(self.data_loader.train_dir, f"seed_{seed}")

    def _test_positions(self, calendar: pd.DatetimeIndex) -> np.ndarray:
        start, end = (pd.Timestamp(d) for d in self.config.test_range)
        positions = np.flatnonzero((calendar >= start) & (calendar <= end))
        if len(positions) < 2:
            raise EmptySplitError(f"test range {self.config.test_range[0]}..{self.config.test_range[1]} "
                                  f"holds {len(positions)} cached dates; at least 2 are needed")
        return positions

    def _rl_label(self) -> str:
        return "a2c" if self.config.feature_set == "full" else "a2c_ohlcv"

    # --- Pipeline stages ---
    def cmd_ingest(self) -> Dict[str, Any]:
        """Loads, cleans and caches the configured tickers; returns the manifest."""
        c = self.config
        frame = clean(load_ohlcv(c.data_source, c.tickers, c.data_range))
        manifest = {
            "config_hash": self.config_hash,
            "data_fingerprint": data_fingerprint(frame),
            "source": c.data_source,
            "tickers": list(frame.tickers),
            "n_dates": len(frame.calendar),
            "first_date": frame.calendar[0].strftime("%Y-%m-%d"),
            "last_date": frame.calendar[-1].strftime("%Y-%m-%d"),
        }
        self.data_loader.save_market_frame(frame, manifest)
        logger.info("Ingested %d dates for %s (fingerprint %s)",
                    manifest["n_dates"], ",".join(frame.tickers), manifest["data_fingerprint"][:12])
        return manifest

    def cmd_features(self) -> Dict[str, Any]:
        """Builds the (T, N, F) feature tensor from the ingest cache and caches it."""
        frame, ingest_manifest = self.data_loader.load_market_frame()
        features = build_feature_matrix(frame, self.config.active_indicators())
        manifest = {
            **self._provenance(ingest_manifest),
            "feature_set": self.config.feature_set,
            "feature_names": list(features.feature_names),
            "feature_names_hash": features.feature_names_hash,
            "warmup_dropped": features.warmup_dropped,
            "n_dates": features.n_steps,
        }
        self.data_loader.save_feature_frame(features, manifest)
        logger.info("Built %d features over %d dates (%d warmup dates dropped)",
                    features.n_features, features.n_steps, features.warmup_dropped)
        return manifest

    def _load_features_and_prices(self):
        features, manifest = self.data_loader.load_feature_frame()
        frame, _ = self.data_loader.load_market_frame()
        return features, frame.restrict(features.calendar), manifest

    def cmd_train(self, seed: Optional[int] = None) -> Dict[str, Any]:
        """
        Trains the actor-critic agent on the training split.

        Args:
            seed (Optional[int]): Overrides the configured training seed.

        Returns:
            Dict[str, Any]: The training summary that is also written to summary.json.
        """
        c = self.config if seed is None else self.config.with_seed(seed)
        run_dir = self.train_run_dir(c.a2c.seed)
        features, prices, manifest = self._load_features_and_prices()
        train_features, _ = split_by_date(features, c.train_end, c.test_range, c.train_start)
        stats = compute_norm_stats(train_features)
        # Hash of the config actually trained, seed override included
        provenance = {**self._provenance(manifest), "config_hash": c.config_hash()}
        self.data_loader.write_json(os.path.join(run_dir, 'norm_stats.json'),
                                    {**stats.to_dict(), **provenance,
                                     "feature_names_hash": features.feature_names_hash})

        normalized = zscore(train_features, stats)
        train_prices = prices.restrict(train_features.calendar)

        def env_factory() -> TradingEnv:
            return TradingEnv(c.env, normalized, train_prices)

        sample_env = env_factory()
        agent = A2CAgent(c.a2c, sample_env.state_size, sample_env.n_actions)
        header = {**provenance, "feature_names_hash": features.feature_names_hash, "seed": c.a2c.seed}
        summary: Dict[str, Any] = {**header, "total_timesteps": c.a2c.total_timesteps,
                                   "train_dates": [train_features.calendar[0].strftime("%Y-%m-%d"),
                                                   train_features.calendar[-1].strftime("%Y-%m-%d")]}
        try:
            result = agent.train(env_factory, os.path.join(run_dir, 'checkpoints'), header)
        except TrainingAbortedError as e:
            summary.update({"status": "aborted", "error": str(e), "last_good_checkpoint": e.last_good_checkpoint})
            self.data_loader.write_json(os.path.join(run_dir, 'summary.json'), summary)
            raise

        self.data_loader.write_csv(os.path.join(run_dir, 'training_log.csv'), result.log,
                                   {**header, "seed": str(c.a2c.seed)})
        summary.update({
            "status": "completed",
            "updates": result.updates,
            "timesteps": result.timesteps,
            "model": result.checkpoints[-1] if result.checkpoints else None,
            "checkpoints": result.checkpoints,
        })
        self.data_loader.write_json(os.path.join(run_dir, 'summary.json'), summary)
        return summary

    def _backtest_rl(self, checkpoint: Optional[str], seed: int) -> Tuple[Dict[str, EquityCurve], pd.DataFrame, Dict[str, Any]]:
        c = self.config
        run_dir = self.train_run_dir(seed)
        checkpoint = checkpoint or os.path.join(run_dir, 'checkpoints', 'model.json')
        features, prices, manifest = self._load_features_and_prices()
        stats_doc = self.data_loader.read_json(os.path.join(run_dir, 'norm_stats.json'))
        if stats_doc.get("feature_names_hash") != features.feature_names_hash:
            raise CheckpointMismatchError(f"training artifacts in {run_dir} were built on a different feature set; "
                                          "re-run train for the current features")
        normalized = zscore(features, NormStats.from_dict(stats_doc))

        test = self._test_positions(features.calendar)
        window = c.env.window
        first = test[0] - (window - 1)
        if first < 0:
            raise InsufficientDataError(f"the test range needs {window - 1} feature dates before it for the state window")
        positions = np.arange(first, test[-1] + 1)
        env = TradingEnv(replace(c.env, episode_length=None), normalized.take(positions), prices.take(positions))
        agent = A2CAgent.load(checkpoint, c.a2c, env.state_size, env.n_actions,
                              {"feature_names_hash": features.feature_names_hash})
        greedy = agent.evaluate_greedy(env, start=window - 1)
        return {"portfolio": greedy.curve}, greedy.trade_log, {"checkpoint": checkpoint, **self._provenance(manifest)}

    def _baseline_frame(self) -> Tuple[MarketFrame, int, Dict[str, Any]]:
        frame, manifest = self.data_loader.load_market_frame()
        test = self._test_positions(frame.calendar)
        return frame.take(np.arange(0, test[-1] + 1)), int(test[0]), manifest

    def cmd_backtest(self, strategy: str = "a2c", checkpoint: Optional[str] = None,
                     seed: Optional[int] = None) -> List[Dict[str, Any]]:
        """
        Runs one strategy over the test range and writes its report.

        The RL agent is executed greedily from a checkpoint; rule-based
        strategies execute their signals. The random strategy runs once per
        configured random seed and adds a mean row.

        Args:
            strategy (str): One of STRATEGY_NAMES (or any ma_<T>).
            checkpoint (Optional[str]): Checkpoint for the RL agent; defaults to the seed's final model.
            seed (Optional[int]): RL training seed whose artifacts to use.

        Returns:
            List[Dict[str, Any]]: Rows in the comparison-table schema.
        """
        c = self.config
        runs: List[Tuple[Optional[int], Dict[str, EquityCurve], pd.DataFrame, MetricsReport]] = []
        if strategy == "a2c":
            seed = c.a2c.seed if seed is None else seed
            label = self._rl_label()
            curves, trades, extra = self._backtest_rl(checkpoint, seed)
            report = evaluate_curves(curves, {"strategy": label, "seed": seed,
                                              "year": period_label(curves["portfolio"].period), **extra})
            runs.append((seed, curves, trades, report))
            run_name = f"{label}_seed{seed}"
        else:
            frame, start, manifest = self._baseline_frame()
            seeds: Sequence[Optional[int]] = c.random_seeds if strategy == "random" else [None]
            for s in seeds:
                baseline = make_strategy(strategy, c.strategies, seed=s if s is not None else c.a2c.seed)
                result = run_rule_based(baseline, c.env, frame, start)
                label = strategy if s is None else f"{strategy}_seed{s}"
                period = next(iter(result.curves.values())).period
                metadata = {**result.description, "strategy": label, "seed": s,
                            "year": period_label(period), **self._provenance(manifest)}
                runs.append((s, result.curves, result.trade_log, evaluate_curves(result.curves, metadata)))
            run_name = strategy

        rows = [report.table_row() for _, _, _, report in runs]
        if strategy == "random":
            seed_mean = aggregate([report for _, _, _, report in runs], across_seeds=True)
            rows.append(seed_mean.table_row("random_mean", rows[0]["Year"]))
        self._write_backtest(run_name, runs, rows)
        return rows

    def cmd_backtest_all(self) -> List[Dict[str, Any]]:
        """Backtests every configured strategy in turn; the RL agent must be trained first."""
        rows: List[Dict[str, Any]] = []
        for name in strategy_names(self.config):
            rows.extend(self.cmd_backtest(name))
        return rows

    def cmd_seed_mean(self, seeds: Sequence[int]) -> Dict[str, Any]:
        """
        Averages the RL backtests of several training seeds into one `<label>_mean` run.

        Args:
            seeds (Sequence[int]): Seeds whose `<label>_seed<n>` backtests already exist.

        Returns:
            Dict[str, Any]: The mean row in the comparison-table schema.
        """
        label = self._rl_label()
        reports, curves = [], []
        for seed in seeds:
            run_dir = os.path.join(self.data_loader.backtest_dir, f"{label}_seed{seed}")
            doc = self.data_loader.read_json(os.path.join(run_dir, 'report.json'))
            reports.append(MetricsReport.from_dict(doc["reports"][0]))
            curves.append(self.data_loader.read_csv(os.path.join(run_dir, 'equity.csv')))
        combined = aggregate(reports, across_seeds=True)
        row = combined.table_row(f"{label}_mean", reports[0].metadata.get("year"))

        run_dir = os.path.join(self.data_loader.backtest_dir, f"{label}_mean")
        header = {"config_hash": self.config_hash, "strategy": f"{label}_mean"}
        equity = pd.DataFrame({"date": curves[0]["date"]})
        for seed, frame in zip(seeds, curves):
            equity[f"portfolio@seed{seed}"] = frame["portfolio"].to_numpy()
        self.data_loader.write_csv(os.path.join(run_dir, 'equity.csv'), equity, header)
        self.data_loader.write_csv(os.path.join(run_dir, 'rows.csv'), pd.DataFrame([row]), header)
        self.data_loader.write_json(os.path.join(run_dir, 'report.json'),
                                    {**header, "rows": [row], "reports": [combined.to_dict()]})
        logger.info("Averaged %s backtests over seeds %s", label, ",".join(str(s) for s in seeds))
        return row

    def _write_backtest(self, run_name: str, runs, rows: List[Dict[str, Any]]) -> str:
        run_dir = os.path.join(self.data_loader.backtest_dir, run_name)
        first_report = runs[0][3]
        header = {"config_hash": self.config_hash,
                  "data_fingerprint": first_report.metadata.get("data_fingerprint", ""),
                  "strategy": run_name}
        multi = len(runs) > 1

        equity = pd.DataFrame({"date": next(iter(runs[0][1].values())).dates.strftime("%Y-%m-%d")})
        for seed, curves, trades, _ in runs:
            for label, curve in curves.items():
                equity[f"{label}@seed{seed}" if multi else label] = curve.values
            name = f"trades_seed{seed}.csv" if multi else "trades.csv"
            self.data_loader.write_csv(os.path.join(run_dir, name), trades, header)

        self.data_loader.write_csv(os.path.join(run_dir, 'equity.csv'), equity, header)
        self.data_loader.write_csv(os.path.join(run_dir, 'rows.csv'), pd.DataFrame(rows), header)
        self.data_loader.write_json(os.path.join(run_dir, 'report.json'), {
            **header,
            "rows": rows,
            "reports": [report.to_dict() for _, _, _, report in runs],
        })
        logger.info("Backtest %s written to %s", run_name, run_dir)
        return run_dir

    def cmd_report(self) -> pd.DataFrame:
        """Merges every backtest run into one comparison table plus plot-ready equity files."""
        runs = self.data_loader.get_backtest_runs()
        if not runs:
            raise MissingArtifactError(f"no backtest outputs under {self.data_loader.backtest_dir}; run backtest first")
        rows: List[Dict[str, Any]] = []
        for run in runs:
            run_dir = os.path.join(self.data_loader.backtest_dir, run)
            rows.extend(self.data_loader.read_csv(os.path.join(run_dir, 'rows.csv')).to_dict("records"))
            equity = self.data_loader.read_csv(os.path.join(run_dir, 'equity.csv'))
            curve_columns = [col for col in equity.columns if col != "date"]
            equity["mean"] = equity[curve_columns].mean(axis=1)
            self.data_loader.write_csv(os.path.join(self.data_loader.report_dir, f"equity_{run}.csv"),
                                       equity, {"config_hash": self.config_hash, "strategy": run})
        table = report_table(rows)
        self.data_loader.write_csv(os.path.join(self.data_loader.report_dir, 'comparison.csv'),
                                   table, {"config_hash": self.config_hash})
        logger.info("Report with %d rows from %d runs", len(table), len(runs))
        return table


def run_stage_for_seed(config: ExperimentConfig, stage: str, seed: int, strategy: str = "a2c",
                       checkpoint: Optional[str] = None) -> Any:
    """Runs train or an RL backtest for one seed; module-level so worker processes can pickle it."""
    backend = TradingResearchBackend(config.with_seed(seed))
    if stage == "train":
        return backend.cmd_train()
    return backend.cmd_backtest(strategy, checkpoint, seed)


def run_seeds(config: ExperimentConfig, stage: str, seeds: Sequence[int], parallel: bool = False,
              strategy: str = "a2c", checkpoint: Optional[str] = None) -> Dict[int, Any]:
    """
    Runs a stage for several independent seeds, optionally in a process pool.
    Each seed writes to its own seed_<n> directory, so runs share no state.
    """
    if not parallel or len(seeds) < 2:
        results = {seed: run_stage_for_seed(config, stage, seed, strategy, checkpoint) for seed in seeds}
    else:
        results = {}
        with ProcessPoolExecutor(max_workers=min(len(seeds), os.cpu_count() or 1)) as executor:
            futures = {executor.submit(run_stage_for_seed, config, stage, seed, strategy, checkpoint): seed
                       for seed in seeds}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
        results = dict(sorted(results.items()))
    if stage == "backtest" and strategy == "a2c" and checkpoint is None and len(seeds) > 1:
        TradingResearchBackend(config).cmd_seed_mean(sorted(results))
    return results
