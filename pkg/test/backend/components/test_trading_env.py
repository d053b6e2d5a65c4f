import os
import sys

import numpy as np
import pandas as pd

# Add project root to Python path to ensure imports work correctly
project_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from backend.components.config import EnvConfig
from backend.components.data_loader import MarketFrame
from backend.components.errors import EnvironmentStateError
from backend.components.indicators import FeatureFrame
from backend.components.trading_env import (
    BUY,
    HOLD,
    SELL,
    TRADE_LOG_COLUMNS,
    TradingEnv,
    decode_action,
    encode_action,
)


def make_env(closes, config: EnvConfig, n_features: int = 2) -> TradingEnv:
    """Environment over a synthetic close matrix; feature value at row t equals t."""
    closes = np.asarray(closes, dtype=np.float64)
    if closes.ndim == 1:
        closes = closes.reshape(-1, 1)
    n_steps, n_assets = closes.shape
    calendar = pd.bdate_range("2020-01-01", periods=n_steps)
    tickers = tuple(f"A{i}" for i in range(n_assets))
    frames = []
    for i, ticker in enumerate(tickers):
        frames.append(pd.DataFrame({
            "date": calendar.strftime("%Y-%m-%d"), "ticker": ticker,
            "open": closes[:, i], "high": closes[:, i], "low": closes[:, i],
            "close": closes[:, i], "volume": 1000.0,
        }))
    prices = MarketFrame.from_long_frame(pd.concat(frames, ignore_index=True))
    values = np.broadcast_to(np.arange(n_steps, dtype=np.float64)[:, None, None],
                             (n_steps, n_assets, n_features)).copy()
    features = FeatureFrame(tickers, prices.calendar, values, tuple(f"f{k}" for k in range(n_features)))
    return TradingEnv(config, features, prices)


def random_walk(n_steps: int, n_assets: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, 0.02, size=(n_steps, n_assets))
    return 50.0 * np.exp(np.cumsum(steps, axis=0))


def test_decode_action():
    print("\n--- Test 1: decode_action ---")
    assert decode_action(3, 2) == [BUY, BUY]
    assert decode_action(0, 2) == [SELL, SELL]
    assert decode_action(5, 4) == [BUY, SELL, BUY, SELL]
    for code in range(16):
        assert encode_action(decode_action(code, 4)) == code
    for bad in (-1, 4, 2.5):
        try:
            decode_action(bad, 2)
            assert False, f"code {bad} accepted"
        except EnvironmentStateError as e:
            print(f"Output (rejected): {e}")


def test_reset():
    print("\n--- Test 2: reset ---")
    env = make_env(np.full(40, 100.0), EnvConfig())
    state = env.reset(19, seed=7)
    print(f"Output: window rows {state.window[:, 0, 0].tolist()}")
    assert state.window.shape == (20, 1, 2)
    assert state.window[:, 0, 0].tolist() == [float(t) for t in range(20)]
    assert env.equity() == 10_000
    assert state.portfolio.cash == 10_000 and state.portfolio.positions == (0,)
    assert state.cash_fraction == 1.0
    assert env.state_size == state.as_vector().shape[0] == 20 * 1 * 2 + 2
    try:
        env.reset(5)
        assert False, "start inside the window accepted"
    except EnvironmentStateError as e:
        print(f"Output (rejected): {e}")
    try:
        env.reset(39)
        assert False, "start on the last index accepted"
    except EnvironmentStateError:
        pass


def test_step_examples():
    print("\n--- Test 3: step arithmetic ---")
    env = make_env(np.full(10, 100.0), EnvConfig(window=1, episode_length=None))
    env.reset(0)
    result = env.step(1)
    print(f"Output (buy): cash {env.account.cash}, position {env.account.positions[0]}, info {result.info['fees']}")
    assert env.account.positions[0] == 20
    assert abs(env.account.cash - 7999.0) < 1e-9
    assert abs(result.info["fees"] - 1.0) < 1e-12
    assert abs(env.equity() - 9999.0) < 1e-9
    assert abs(result.reward - (-1.0 / 10_000)) < 1e-12
    trade = result.info["trades"][0]
    assert (trade.op, trade.shares, trade.price) == (BUY, 20, 100.0)

    env = make_env(np.full(10, 10.0), EnvConfig(window=1, episode_length=None))
    env.reset(0)
    env.account.positions[0] = 50
    cash_before = env.account.cash
    result = env.step(0)
    print(f"Output (sell): position {env.account.positions[0]}, cash delta {env.account.cash - cash_before}")
    assert env.account.positions[0] == 25
    assert abs(env.account.cash - cash_before - 249.875) < 1e-9
    assert abs(result.info["fees"] - 0.125) < 1e-12

    env = make_env(np.full(10, 100.0), EnvConfig(window=1, episode_length=None))
    env.reset(0)
    result = env.step(0)
    print(f"Output (sell with no position): reward {result.reward}, invalid {result.info['invalid_count']}")
    assert result.reward == 0.0 and result.info["invalid_count"] == 0 and result.info["trades"] == []

    env.account.cash = 50.0
    result = env.step(1)
    print(f"Output (unaffordable buy): reward {result.reward}, invalid {result.info['invalid_count']}")
    assert result.info["invalid_count"] == 1
    assert abs(result.reward - (-0.001)) < 1e-12
    assert env.account.positions[0] == 0 and env.account.cash == 50.0


def test_buy_budget_from_pre_step_cash():
    print("\n--- Test 4: buy budgets and cash exhaustion ---")
    env = make_env(np.full((5, 2), 100.0), EnvConfig(window=1, episode_length=None))
    env.reset(0)
    env.step(3)
    print(f"Output: positions {env.account.positions.tolist()}, cash {env.account.cash}")
    assert env.account.positions.tolist() == [20, 20]
    assert abs(env.account.cash - (10_000 - 2 * 2001.0)) < 1e-9

    env = make_env(np.full((5, 2), 100.0), EnvConfig(window=1, episode_length=None, buy_fraction=1.0))
    env.reset(0)
    result = env.step(3)
    print(f"Output (exhausted): positions {env.account.positions.tolist()}, invalid {result.info['invalid_count']}")
    assert env.account.positions.tolist() == [99, 0]
    assert result.info["invalid_count"] == 1
    assert env.account.cash >= 0


def test_observe_and_done():
    print("\n--- Test 5: observe and episode end ---")
    env = make_env(np.full(30, 100.0), EnvConfig(window=3, episode_length=3))
    env.reset(4)
    first, second = env.observe(), env.observe()
    assert np.array_equal(first.as_vector(), second.as_vector())
    assert first.window[-1, 0, 0] == 4.0
    dones = []
    for k in range(3):
        result = env.step(0)
        dones.append(result.done)
        assert result.next_state.window[-1, 0, 0] == 4.0 + k + 1
    print(f"Output: done flags {dones}, end {env.end}")
    assert dones == [False, False, True] and env.end == 7
    try:
        env.step(0)
        assert False, "step after done accepted"
    except EnvironmentStateError as e:
        print(f"Output (rejected): {e}")

    short = make_env(np.full(10, 100.0), EnvConfig(window=3, episode_length=100))
    short.reset(2)
    assert short.end == 9
    assert list(short.valid_starts()) == list(range(2, 9))
    assert list(env.valid_starts()) == list(range(2, 27))
    try:
        make_env(np.full(3, 100.0), EnvConfig(window=3)).valid_starts()
        assert False, "too short a series accepted"
    except EnvironmentStateError:
        pass


def test_accounting_fuzz(total_steps: int = 100_000):
    print("\n--- Test 6: accounting identity, telescoping and bounds under random actions ---")
    rng = np.random.default_rng(100)
    steps, n_configs = 0, 0
    while steps < total_steps:
        n_assets = int(rng.integers(1, 5))
        episode_length = None if rng.random() < 0.3 else int(rng.integers(5, 300))
        config = EnvConfig(
            initial_capital=float(rng.uniform(1_000.0, 100_000.0)),
            fee_rate=float(rng.choice([0.0, rng.uniform(0.0, 0.005)])),
            window=int(rng.integers(1, 6)),
            buy_fraction=float(rng.uniform(0.05, 1.0)),
            sell_fraction=float(rng.uniform(0.1, 1.0)),
            invalid_penalty=float(rng.uniform(0.0, 0.01)),
            episode_length=episode_length,
        )
        closes = random_walk(int(rng.integers(50, 800)), n_assets, int(rng.integers(1_000_000)))
        env = make_env(closes, config)
        # Buy-heavy, sell-heavy or balanced action mixes
        p_buy = float(rng.choice([0.1, 0.5, 0.9]))
        starts = list(env.valid_starts())
        config_steps = 0
        while config_steps < 2_000 and steps < total_steps:
            env.reset(int(rng.choice(starts)))
            start_equity = env.equity()
            reward_sum, invalid_sum = 0.0, 0
            while not env.done:
                bits = rng.random(n_assets) < p_buy
                result = env.step(int(sum(1 << i for i in range(n_assets) if bits[i])))
                reward_sum += result.reward
                invalid_sum += result.info["invalid_count"]
                account = env.account
                assert account.cash >= 0
                assert (account.positions >= 0).all()
                identity = account.cash + float(np.dot(account.positions, closes[env.t]))
                assert abs(env.equity() - identity) <= 1e-9 * max(1.0, abs(identity))
                assert result.info["equity"] == env.equity()
                config_steps += 1
            telescoped = (reward_sum + config.invalid_penalty * invalid_sum) * config.initial_capital
            assert abs(telescoped - (env.equity() - start_equity)) < 1e-6 * max(1.0, config.initial_capital / 10_000)
        steps += config_steps
        n_configs += 1
    print(f"Output: {steps} steps over {n_configs} random configurations")


def test_conservation_and_fees():
    print("\n--- Test 7: conservation without fees, fee drag with fees ---")
    rng = np.random.default_rng(5)
    actions = rng.integers(4, size=300).tolist()
    flat = np.full((302, 2), 37.0)
    final = {}
    for fee_rate in (0.0, 0.0005):
        env = make_env(flat, EnvConfig(window=1, episode_length=None, fee_rate=fee_rate))
        env.reset(0)
        fees = 0.0
        for action in actions:
            fees += env.step(action).info["fees"]
            if fee_rate == 0.0:
                assert abs(env.equity() - 10_000) < 1e-9
        final[fee_rate] = env.equity()
        assert abs(env.equity() - (10_000 - fees)) < 1e-8
    print(f"Output: final equity {final}")
    assert final[0.0005] <= final[0.0]


def test_determinism_and_trade_log():
    print("\n--- Test 8: determinism and trade log ---")
    closes = random_walk(200, 2, 11)
    actions = np.random.default_rng(3).integers(4, size=150).tolist()
    runs = []
    for _ in range(2):
        env = make_env(closes, EnvConfig(window=5, episode_length=None))
        env.reset(10, seed=1)
        rewards = [env.step(a).reward for a in actions]
        runs.append((rewards, env.trade_log_frame()))
    assert runs[0][0] == runs[1][0]
    pd.testing.assert_frame_equal(runs[0][1], runs[1][1])
    log = runs[0][1]
    print(f"Output: {len(log)} trades, columns {list(log.columns)}")
    assert list(log.columns) == TRADE_LOG_COLUMNS
    assert set(log["op"]) <= {BUY, SELL}
    assert log["t"].is_monotonic_increasing

    env = make_env(np.full((5, 2), 100.0), EnvConfig(window=1, episode_length=None))
    env.reset(0)
    result = env.step_ops([HOLD, BUY])
    assert env.account.positions.tolist() == [0, 20] and len(result.info["trades"]) == 1


if __name__ == "__main__":
    print("--- Testing trading_env ---")
    test_decode_action()
    test_reset()
    test_step_examples()
    test_buy_budget_from_pre_step_cash()
    test_observe_and_done()
    test_accounting_fuzz()
    test_conservation_and_fees()
    test_determinism_and_trade_log()
    print("\nAll trading_env tests passed.")
