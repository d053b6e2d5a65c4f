import os
import sys
import shutil
from unittest.mock import patch

# Add project root to Python path to ensure imports work correctly
project_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from backend.components.config import A2CConfig, EnvConfig, ExperimentConfig, DEFAULT_TICKERS, config_from_dict, load_config
from backend.components.errors import InvalidParameterError, MissingFileError

MOCK_CONFIG_DIR = os.path.join(project_root, 'test_config_temp')
CLEAN_ENV = {k: v for k, v in os.environ.items() if not k.startswith("TRADER_")}


def write_config(text: str) -> str:
    os.makedirs(MOCK_CONFIG_DIR, exist_ok=True)
    path = os.path.join(MOCK_CONFIG_DIR, 'experiment.json5')
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def cleanup():
    if os.path.exists(MOCK_CONFIG_DIR):
        shutil.rmtree(MOCK_CONFIG_DIR)


def test_defaults():
    print("\n--- Test 1: defaults ---")
    config = ExperimentConfig()
    print(f"Output: env {config.env}")
    assert config.env.initial_capital == 10_000 and config.env.fee_rate == 0.0005
    assert config.env.window == 20 and config.env.buy_fraction == 0.2 and config.env.sell_fraction == 0.5
    assert config.a2c.gamma == 0.96 and config.a2c.rollout_steps == 50
    assert config.a2c.value_coef == 0.5 and config.a2c.entropy_coef == 0.05
    assert config.a2c.learning_rate == 1e-5 and config.a2c.seed == 42
    assert config.random_seeds == (42, 43, 44, 45, 46)
    assert config.strategies.ma_periods == (10, 20, 30)
    assert len(config.active_indicators()) == 10
    assert config_from_dict({"feature_set": "ohlcv"}).active_indicators() == []


def test_load_config_precedence():
    print("\n--- Test 2: load_config precedence ---")
    try:
        path = write_config("""
        // comments are allowed
        {
          tickers: ["AAPL", "MSFT", "JNJ", "NVDA", "CCL"],
          a2c: {gamma: 0.9},
          output_dir: "from_file",
        }
        """)
        with patch.dict(os.environ, CLEAN_ENV, clear=True):
            desk = load_config(path)
            print(f"Output (desk): tickers {desk.tickers}, timesteps {desk.a2c.total_timesteps}")
            assert desk.tickers == ("AAPL", "MSFT", "JNJ", "NVDA")
            assert desk.a2c.total_timesteps == 100_000
            assert desk.a2c.gamma == 0.9 and desk.a2c.rollout_steps == 50
            assert desk.output_dir == "from_file"

            paper = load_config(path, profile="paper")
            assert len(paper.tickers) == 5 and paper.a2c.total_timesteps == 1_000_000
            assert load_config(None, profile="paper").tickers == tuple(DEFAULT_TICKERS)

        with patch.dict(os.environ, {**CLEAN_ENV, "TRADER_OUTPUT_DIR": "from_env", "TRADER_PROFILE": "paper"}, clear=True):
            env_config = load_config(path)
            assert env_config.output_dir == "from_env" and env_config.profile == "paper"
            cli_config = load_config(path, profile="desk", seed=7, output_dir="from_cli")
            print(f"Output (CLI overrides): out {cli_config.output_dir}, profile {cli_config.profile}, seed {cli_config.a2c.seed}")
            assert cli_config.output_dir == "from_cli" and cli_config.profile == "desk" and cli_config.a2c.seed == 7
    finally:
        cleanup()


def test_config_hash():
    print("\n--- Test 3: config_hash ---")
    base = ExperimentConfig()
    assert base.config_hash() == ExperimentConfig().config_hash()
    assert ExperimentConfig(output_dir="elsewhere").config_hash() == base.config_hash()
    assert base.with_seed(43).config_hash() != base.config_hash()
    assert config_from_dict(base.to_dict()).config_hash() == base.config_hash()
    print(f"Output: {base.config_hash()[:16]}...")


def test_invalid_configuration():
    print("\n--- Test 4: validation ---")
    cases = [
        lambda: A2CConfig(gamma=0.0),
        lambda: A2CConfig(rollout_steps=0),
        lambda: EnvConfig(buy_fraction=1.5),
        lambda: config_from_dict({"unknown_key": 1}),
        lambda: config_from_dict({"env": {"windw": 3}}),
        lambda: config_from_dict({"feature_set": "everything"}),
    ]
    for case in cases:
        try:
            case()
            assert False, "invalid configuration accepted"
        except InvalidParameterError as e:
            print(f"Output (rejected): {e}")
    try:
        load_config(os.path.join(MOCK_CONFIG_DIR, 'missing.json5'))
        assert False, "missing file accepted"
    except MissingFileError:
        pass


if __name__ == "__main__":
    print("--- Testing config ---")
    test_defaults()
    test_load_config_precedence()
    test_config_hash()
    test_invalid_configuration()
    print("\nAll config tests passed.")
