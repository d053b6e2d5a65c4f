import os
import sys
import shutil
from dataclasses import replace

import numpy as np
import pandas as pd

# Add project root to Python path to ensure imports work correctly
project_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from backend.components.config import config_from_dict
from backend.components.data_loader import DataLoader
from backend.components.errors import CheckpointMismatchError, MissingArtifactError
from backend.components.metrics import REPORT_COLUMNS
from backend.main import TradingResearchBackend, run_seeds, strategy_names

MOCK_RUN_DIR = os.path.join(project_root, 'test_main_temp')


def write_market_csv(path: str, tickers=("AAA", "BBB"), seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    calendar = pd.bdate_range("2019-01-01", "2020-06-30")
    frames = []
    for ticker in tickers:
        close = 40.0 * np.exp(np.cumsum(rng.normal(0.0003, 0.015, len(calendar))))
        open_ = np.r_[close[0], close[:-1]]
        frames.append(pd.DataFrame({
            "date": calendar.strftime("%Y-%m-%d"), "ticker": ticker, "open": open_,
            "high": np.maximum(open_, close) * 1.01, "low": np.minimum(open_, close) * 0.99,
            "close": close, "volume": rng.integers(1_000, 5_000, len(calendar)).astype(float),
        }))
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def make_config(**overrides):
    data = {
        "data_source": os.path.join(MOCK_RUN_DIR, 'ohlcv.csv'),
        "tickers": ["AAA", "BBB"],
        "data_range": ["2019-01-01", "2020-06-30"],
        "train_start": "2019-01-01",
        "train_end": "2019-12-31",
        "test_range": ["2020-01-01", "2020-06-30"],
        "env": {"window": 5, "episode_length": 20},
        "a2c": {"hidden_sizes": [8], "total_timesteps": 60, "rollout_steps": 10,
                "learning_rate": 1e-3, "checkpoint_interval": 3, "seed": 7},
        "strategies": {"arima_window": 200, "arima_refit_every": 30},
        "random_seeds": [42, 43],
        "output_dir": os.path.join(MOCK_RUN_DIR, 'runs'),
    }
    data.update(overrides)
    return config_from_dict(data)


def setup_run_dir():
    cleanup_run_dir()
    os.makedirs(MOCK_RUN_DIR, exist_ok=True)
    write_market_csv(os.path.join(MOCK_RUN_DIR, 'ohlcv.csv'))


def cleanup_run_dir():
    if os.path.exists(MOCK_RUN_DIR):
        shutil.rmtree(MOCK_RUN_DIR)



def read_header(path: str) -> dict:
    """The '# key=value' provenance lines at the top of a written CSV."""
    header = {}
    with open(path, encoding='utf-8') as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition("=")
            header[key] = value
    return header


def run_pipeline(config) -> TradingResearchBackend:
    backend = TradingResearchBackend(config)
    backend.cmd_ingest()
    backend.cmd_features()
    backend.cmd_train()
    backend.cmd_backtest_all()
    backend.cmd_report()
    return backend


def collect_outputs(output_dir: str) -> dict:
    """Bytes of the training log, every trade log and the comparison table, keyed by relative path."""
    outputs = {}
    for root, _, files in os.walk(output_dir):
        for name in files:
            if name in ("training_log.csv", "comparison.csv") or (name.startswith("trades") and name.endswith(".csv")):
                path = os.path.join(root, name)
                with open(path, 'rb') as f:
                    outputs[os.path.relpath(path, output_dir)] = f.read()
    return outputs

def test_full_pipeline():
    print("\n--- Test 1: ingest -> features -> train -> backtest -> report ---")
    setup_run_dir()
    try:
        config = make_config()
        backend = TradingResearchBackend(config)
        loader = DataLoader(config.output_dir)

        try:
            backend.cmd_report()
            assert False, "report without backtests accepted"
        except MissingArtifactError as e:
            print(f"Output (rejected): {e}")

        ingest = backend.cmd_ingest()
        print(f"Output (ingest): {ingest['n_dates']} dates, {ingest['first_date']}..{ingest['last_date']}")
        assert ingest["tickers"] == ["AAA", "BBB"] and ingest["config_hash"] == config.config_hash()
        assert ingest["first_date"] == "2019-01-01" and ingest["last_date"] == "2020-06-30"

        features = backend.cmd_features()
        assert len(features["feature_names"]) == 26 and features["warmup_dropped"] == 51
        assert features["n_dates"] == ingest["n_dates"] - 51

        summary = backend.cmd_train()
        print(f"Output (train): {summary['status']}, {summary['updates']} updates")
        assert summary["status"] == "completed" and summary["updates"] == 6 and summary["timesteps"] == 60
        run_dir = backend.train_run_dir()
        assert run_dir.endswith("seed_7")
        for name in ("norm_stats.json", "training_log.csv", "summary.json", os.path.join("checkpoints", "model.json"),
                     os.path.join("checkpoints", "checkpoint_000006.json")):
            assert os.path.exists(os.path.join(run_dir, name)), name
        log = loader.read_csv(os.path.join(run_dir, 'training_log.csv'))
        assert list(log.columns) == ["update_idx", "timesteps", "policy_loss", "value_loss", "entropy",
                                     "mean_reward", "equity"]
        with open(os.path.join(run_dir, 'training_log.csv'), encoding='utf-8') as f:
            assert f.readline().startswith("# ")

        rows = backend.cmd_backtest("a2c")
        print(f"Output (a2c backtest): {rows}")
        assert len(rows) == 1 and rows[0]["Strategy"] == "a2c" and rows[0]["Year"] == "2020"
        equity = loader.read_csv(os.path.join(loader.backtest_dir, 'a2c_seed7', 'equity.csv'))
        assert equity["date"].iloc[0] == "2020-01-01" and equity["date"].iloc[-1] == "2020-06-30"
        assert equity["portfolio"].iloc[0] == 10_000.0

        hold = backend.cmd_backtest("hold")
        assert hold[0]["Return_Rate"] == 0.0 and hold[0]["Max_Drawdown"] == 0.0
        random_rows = backend.cmd_backtest("random")
        assert [r["Strategy"] for r in random_rows] == ["random_seed42", "random_seed43", "random_mean"]
        mean_return = round((random_rows[0]["Return_Rate"] + random_rows[1]["Return_Rate"]) / 2, 2)
        assert abs(random_rows[2]["Return_Rate"] - mean_return) <= 0.01
        for strategy in ("ma_10", "index_tracking", "arima"):
            assert backend.cmd_backtest(strategy)[0]["Strategy"] == strategy
        assert os.path.exists(os.path.join(loader.backtest_dir, 'random', 'trades_seed43.csv'))

        table = backend.cmd_report()
        print(f"Output (report):\n{table}")
        assert list(table.columns) == REPORT_COLUMNS
        assert table["Strategy"].tolist() == ["a2c", "arima", "hold", "index_tracking", "ma_10",
                                              "random_mean", "random_seed42", "random_seed43"]
        assert (table["Year"] == "2020").all()
        assert os.path.exists(os.path.join(loader.report_dir, 'comparison.csv'))
        equity = loader.read_csv(os.path.join(loader.report_dir, 'equity_ma_10.csv'))
        assert np.allclose(equity["mean"], equity[["AAA", "BBB"]].mean(axis=1))

        plain = TradingResearchBackend(replace(config, feature_set="ohlcv"))
        assert plain.cmd_features()["feature_names"] == ["open", "high", "low", "close", "volume"]
        try:
            plain.cmd_backtest("a2c")
            assert False, "checkpoint built on other features accepted"
        except CheckpointMismatchError as e:
            print(f"Output (rejected): {e}")
    finally:
        cleanup_run_dir()


def test_run_seeds():
    print("\n--- Test 2: training several seeds ---")
    setup_run_dir()
    try:
        config = make_config(a2c={"hidden_sizes": [8], "total_timesteps": 20, "rollout_steps": 10})
        backend = TradingResearchBackend(config)
        backend.cmd_ingest()
        backend.cmd_features()
        results = run_seeds(config, "train", [1, 2])
        print(f"Output: {sorted(results)}")
        assert sorted(results) == [1, 2]
        for seed in (1, 2):
            header = read_header(os.path.join(backend.data_loader.train_dir, f"seed_{seed}", "training_log.csv"))
            assert header["config_hash"] == config.with_seed(seed).config_hash() != config.config_hash()
            assert header["seed"] == str(seed)
        assert all(r["status"] == "completed" and r["timesteps"] == 20 for r in results.values())
        for seed in (1, 2):
            assert os.path.exists(os.path.join(backend.data_loader.train_dir, f"seed_{seed}", 'checkpoints', 'model.json'))
        rows = run_seeds(config, "backtest", [1, 2])
        assert [r[0]["Strategy"] for r in rows.values()] == ["a2c", "a2c"]
        mean_dir = os.path.join(backend.data_loader.backtest_dir, "a2c_mean")
        mean_row = backend.data_loader.read_csv(os.path.join(mean_dir, "rows.csv")).iloc[0]
        print(f"Output (seed mean): {mean_row.to_dict()}")
        assert mean_row["Strategy"] == "a2c_mean"
        seed_returns = [rows[s][0]["Return_Rate"] for s in (1, 2)]
        assert abs(mean_row["Return_Rate"] - sum(seed_returns) / 2) <= 0.011
        equity = backend.data_loader.read_csv(os.path.join(mean_dir, "equity.csv"))
        assert list(equity.columns) == ["date", "portfolio@seed1", "portfolio@seed2"]

        # Seed override on a single backend: the header hash is that of the seeded config
        backend.cmd_train(seed=5)
        header = read_header(os.path.join(backend.train_run_dir(5), "training_log.csv"))
        assert header["config_hash"] == config.with_seed(5).config_hash()
        stats = backend.data_loader.read_json(os.path.join(backend.train_run_dir(5), "norm_stats.json"))
        assert stats["config_hash"] == header["config_hash"]
    finally:
        cleanup_run_dir()


def test_strategy_names_follow_config():
    print("\n--- Test 3: strategy set from ma_periods ---")
    names = strategy_names(make_config(strategies={"ma_periods": [5, 15]}))
    print(f"Output: {names}")
    assert names == ["a2c", "random", "ma_5", "ma_15", "index_tracking", "arima", "hold"]
    assert [n for n in strategy_names(make_config()) if n.startswith("ma_")] == ["ma_10", "ma_20", "ma_30"]


def test_pipeline_is_reproducible():
    print("\n--- Test 4: two runs of the same config write identical outputs ---")
    setup_run_dir()
    try:
        strategies = {"ma_periods": [5, 15], "arima_window": 200, "arima_refit_every": 30}
        outputs = []
        for run in ("first", "second"):
            config = make_config(strategies=strategies, output_dir=os.path.join(MOCK_RUN_DIR, run))
            backend = run_pipeline(config)
            table = backend.data_loader.read_csv(os.path.join(backend.data_loader.report_dir, 'comparison.csv'))
            assert table["Strategy"].tolist() == ["a2c", "arima", "hold", "index_tracking", "ma_15", "ma_5",
                                                  "random_mean", "random_seed42", "random_seed43"]
            outputs.append(collect_outputs(config.output_dir))
        print(f"Output: compared {sorted(outputs[0])}")
        assert sorted(outputs[0]) == sorted(outputs[1])
        assert any(name.endswith("training_log.csv") for name in outputs[0])
        assert any(name.endswith("comparison.csv") for name in outputs[0])
        assert sum(os.path.basename(name).startswith("trades") for name in outputs[0]) == 8
        for name, content in outputs[0].items():
            assert content == outputs[1][name], f"{name} differs between runs"
    finally:
        cleanup_run_dir()


if __name__ == "__main__":
    print("--- Testing main pipeline ---")
    test_full_pipeline()
    test_run_seeds()
    test_strategy_names_follow_config()
    test_pipeline_is_reproducible()
    print("\nAll main pipeline tests passed.")
