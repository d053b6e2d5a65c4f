import io
import os
import sys
import shutil
import argparse
from contextlib import redirect_stderr, redirect_stdout
from unittest.mock import patch

import numpy as np
import pandas as pd

# Add project root to Python path to ensure imports work correctly
project_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from frontend.cli import _seed_list, build_parser, main

MOCK_CLI_DIR = os.path.join(project_root, 'test_cli_temp')
CLEAN_ENV = {k: v for k, v in os.environ.items() if not k.startswith("TRADER_")}


def run_main(argv):
    out, err = io.StringIO(), io.StringIO()
    with patch.dict(os.environ, CLEAN_ENV, clear=True), redirect_stdout(out), redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


def write_inputs() -> str:
    os.makedirs(MOCK_CLI_DIR, exist_ok=True)
    calendar = pd.bdate_range("2020-01-01", periods=30)
    close = np.linspace(10.0, 20.0, 30)
    pd.DataFrame({"date": calendar.strftime("%Y-%m-%d"), "ticker": "AAA", "open": close, "high": close + 1,
                  "low": close - 1, "close": close, "volume": 100.0}).to_csv(
        os.path.join(MOCK_CLI_DIR, 'ohlcv.csv'), index=False)
    path = os.path.join(MOCK_CLI_DIR, 'experiment.json5')
    with open(path, 'w', encoding='utf-8') as f:
        f.write("{\n  // minimal run\n  data_source: '%s',\n  tickers: ['AAA'],\n"
                "  data_range: ['2020-01-01', '2020-12-31'],\n  output_dir: '%s',\n}\n"
                % (os.path.join(MOCK_CLI_DIR, 'ohlcv.csv').replace("\\", "/"),
                   os.path.join(MOCK_CLI_DIR, 'runs').replace("\\", "/")))
    return path


def cleanup():
    if os.path.exists(MOCK_CLI_DIR):
        shutil.rmtree(MOCK_CLI_DIR)


def test_argument_parsing():
    print("\n--- Test 1: argument parsing ---")
    assert _seed_list("42-46") == [42, 43, 44, 45, 46]
    assert _seed_list("42,44") == [42, 44]
    try:
        _seed_list(" , ")
        assert False, "empty seed list accepted"
    except argparse.ArgumentTypeError:
        pass

    parser = build_parser()
    args = parser.parse_args(["backtest", "--strategy", "ma_15", "--seeds", "1-3", "--out", "elsewhere"])
    print(f"Output: {vars(args)}")
    assert args.command == "backtest" and args.strategy == "ma_15" and args.seeds == [1, 2, 3]
    assert args.out == "elsewhere" and args.parallel_seeds is False
    assert parser.parse_args(["train"]).seeds is None
    assert parser.parse_args(["backtest", "--strategy", "all"]).strategy == "all"
    with redirect_stderr(io.StringIO()):
        for argv in (["backtest", "--strategy", "momentum"], ["report", "--seeds", "1"], []):
            try:
                parser.parse_args(argv)
                assert False, f"{argv} accepted"
            except SystemExit as e:
                assert e.code == 2


def test_exit_codes():
    print("\n--- Test 2: exit codes and one-line errors ---")
    try:
        config = write_inputs()
        code, out, err = run_main(["ingest", "--config", config, "--log-level", "ERROR"])
        print(f"Output (ingest): code {code}, stdout {out.strip()!r}")
        assert code == 0 and out.startswith("ingested 30 dates")

        code, out, err = run_main(["report", "--config", config, "--log-level", "ERROR"])
        print(f"Output (report without backtests): code {code}, stderr {err.strip()!r}")
        assert code == 2
        assert err.startswith("MissingArtifactError: ") and err.count("\n") == 1

        code, _, err = run_main(["ingest", "--config", os.path.join(MOCK_CLI_DIR, 'missing.json5'),
                                 "--log-level", "ERROR"])
        assert code == 2 and err.startswith("MissingFileError: ")

        with patch("frontend.cli.TradingResearchBackend.cmd_ingest", side_effect=RuntimeError("boom\nsecond line")):
            code, _, err = run_main(["ingest", "--config", config, "--log-level", "ERROR"])
        print(f"Output (unexpected failure): code {code}, stderr {err.strip()!r}")
        assert code == 1 and err == "RuntimeError: boom second line\n"
    finally:
        cleanup()


def test_seed_fan_out():
    print("\n--- Test 3: --seeds and --strategy all dispatch ---")
    with patch("frontend.cli.run_seeds", return_value={1: {"status": "completed"}, 2: {"status": "completed"}}) as fan_out:
        code, out, _ = run_main(["train", "--seeds", "1-2", "--parallel-seeds", "--log-level", "ERROR"])
    print(f"Output: {out.strip()!r}")
    assert code == 0
    _, stage, seeds, parallel, strategy, checkpoint = fan_out.call_args.args
    assert (stage, seeds, parallel, strategy, checkpoint) == ("train", [1, 2], True, "a2c", None)
    assert out.splitlines() == ["seed 1: {'status': 'completed'}", "seed 2: {'status': 'completed'}"]

    try:
        with patch("frontend.cli.TradingResearchBackend.cmd_backtest_all", return_value=[{"Strategy": "hold"}]) as every, \
                patch("frontend.cli.TradingResearchBackend.cmd_backtest") as single:
            code, out, _ = run_main(["backtest", "--strategy", "all", "--out", os.path.join(MOCK_CLI_DIR, 'runs'),
                                     "--log-level", "ERROR"])
        print(f"Output (--strategy all): {out.strip()!r}")
        assert code == 0 and out.strip() == "hold"
        assert every.call_count == 1 and single.call_count == 0
    finally:
        cleanup()


if __name__ == "__main__":
    print("--- Testing cli ---")
    test_argument_parsing()
    test_exit_codes()
    test_seed_fan_out()
    print("\nAll cli tests passed.")
