import os
import copy
import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict, replace
from typing import Any, Dict, List, Optional, Tuple

import json5
from dotenv import load_dotenv

from backend.components.errors import InvalidParameterError, MissingFileError
from backend.components.indicators import IndicatorSpec, default_indicator_specs

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_TICKERS = [
    "AAPL", "MSFT", "JNJ", "NVDA", "CCL", "RCL", "AAL", "UAL", "DAL",
    "MRO", "OXY", "WYNN", "LVS", "AXP", "BAC", "CVX", "GOOGL",
]

# Profile values act as defaults: anything set explicitly in the config file wins,
# except max_assets which always truncates the configured ticker list.
PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {"max_assets": 4, "total_timesteps": 100_000},
    "paper": {"max_assets": None, "total_timesteps": 1_000_000},
}

FEATURE_SETS = ("full", "ohlcv")


@dataclass(frozen=True)
class EnvConfig:
    initial_capital: float = 10_000.0
    fee_rate: float = 0.0005
    window: int = 20
    buy_fraction: float = 0.2
    sell_fraction: float = 0.5
    invalid_penalty: float = 0.001
    # None runs the episode to the last available index
    episode_length: Optional[int] = 252

    def __post_init__(self):
        if not 0 < self.buy_fraction <= 1:
            raise InvalidParameterError(f"buy_fraction must be in (0, 1], got {self.buy_fraction}")
        if not 0 < self.sell_fraction <= 1:
            raise InvalidParameterError(f"sell_fraction must be in (0, 1], got {self.sell_fraction}")
        if self.fee_rate < 0:
            raise InvalidParameterError(f"fee_rate must be >= 0, got {self.fee_rate}")
        if self.window < 1:
            raise InvalidParameterError(f"window must be >= 1, got {self.window}")
        if self.initial_capital <= 0:
            raise InvalidParameterError(f"initial_capital must be > 0, got {self.initial_capital}")
        if self.invalid_penalty < 0:
            raise InvalidParameterError(f"invalid_penalty must be >= 0, got {self.invalid_penalty}")
        if self.episode_length is not None and self.episode_length < 1:
            raise InvalidParameterError(f"episode_length must be >= 1, got {self.episode_length}")


@dataclass(frozen=True)
class A2CConfig:
    gamma: float = 0.96
    rollout_steps: int = 50
    value_coef: float = 0.5
    entropy_coef: float = 0.05
    learning_rate: float = 1e-5
    total_timesteps: int = 100_000
    seed: int = 42
    hidden_sizes: Tuple[int, ...] = (256, 128)
    normalize_advantages: bool = False
    max_grad_norm: Optional[float] = None
    checkpoint_interval: int = 100
    log_interval: int = 10

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise InvalidParameterError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.rollout_steps < 1:
            raise InvalidParameterError(f"rollout_steps must be >= 1, got {self.rollout_steps}")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise InvalidParameterError("loss coefficients must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.total_timesteps < 0:
            raise InvalidParameterError(f"total_timesteps must be >= 0, got {self.total_timesteps}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise InvalidParameterError("max_grad_norm must be > 0 when set")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))


@dataclass(frozen=True)
class StrategyConfig:
    random_probs: Tuple[float, float, float] = (0.2, 0.2, 0.6)
    ma_periods: Tuple[int, ...] = (10, 20, 30)
    index_band: float = 0.02
    arima_order: int = 5
    arima_threshold: float = 0.005
    arima_refit_every: int = 20
    arima_window: int = 504

    def __post_init__(self):
        object.__setattr__(self, "random_probs", tuple(float(p) for p in self.random_probs))
        object.__setattr__(self, "ma_periods", tuple(int(p) for p in self.ma_periods))


@dataclass(frozen=True)
class ExperimentConfig:
    data_source: str = os.path.join("data", "raw_files", "ohlcv_example.csv")
    tickers: Tuple[str, ...] = tuple(DEFAULT_TICKERS)
    data_range: Tuple[str, str] = ("2000-01-03", "2022-12-30")
    train_start: Optional[str] = "2010-01-01"
    train_end: str = "2019-12-31"
    test_range: Tuple[str, str] = ("2020-01-01", "2020-12-31")
    feature_set: str = "full"
    indicators: Tuple[IndicatorSpec, ...] = field(default_factory=lambda: tuple(default_indicator_specs()))
    env: EnvConfig = field(default_factory=EnvConfig)
    a2c: A2CConfig = field(default_factory=A2CConfig)
    strategies: StrategyConfig = field(default_factory=StrategyConfig)
    random_seeds: Tuple[int, ...] = (42, 43, 44, 45, 46)
    profile: str = "desk"
    output_dir: str = "runs"

    def __post_init__(self):
        if self.feature_set not in FEATURE_SETS:
            raise InvalidParameterError(f"feature_set must be one of {FEATURE_SETS}, got {self.feature_set!r}")
        if self.profile not in PROFILES:
            raise InvalidParameterError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if not self.tickers:
            raise InvalidParameterError("at least one ticker is required")
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "data_range", tuple(self.data_range))
        object.__setattr__(self, "test_range", tuple(self.test_range))
        object.__setattr__(self, "random_seeds", tuple(int(s) for s in self.random_seeds))

    def active_indicators(self) -> List[IndicatorSpec]:
        """Indicator list for the configured feature set ('ohlcv' is the plain A2C variant)."""
        return [] if self.feature_set == "ohlcv" else list(self.indicators)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["indicators"] = [spec.to_dict() for spec in self.indicators]
        return data

    def config_hash(self) -> str:
        """SHA-256 over the canonical config, ignoring where outputs are written."""
        data = self.to_dict()
        data.pop("output_dir", None)
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, a2c=replace(self.a2c, seed=int(seed)))


def _deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Builds an ExperimentConfig from a plain dictionary (as parsed from JSON5).

    Args:
        data (Dict[str, Any]): Possibly partial configuration; missing keys take defaults.

    Returns:
        ExperimentConfig: The validated configuration.
    """
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise InvalidParameterError(f"unknown configuration keys: {sorted(unknown)}")
    kwargs = dict(data)
    try:
        if "env" in kwargs:
            kwargs["env"] = EnvConfig(**kwargs["env"])
        if "a2c" in kwargs:
            kwargs["a2c"] = A2CConfig(**kwargs["a2c"])
        if "strategies" in kwargs:
            kwargs["strategies"] = StrategyConfig(**kwargs["strategies"])
    except TypeError as e:
        raise InvalidParameterError(f"invalid configuration section: {e}") from e
    if "indicators" in kwargs:
        kwargs["indicators"] = tuple(IndicatorSpec.from_dict(item) for item in kwargs["indicators"])
    return ExperimentConfig(**kwargs)


def load_config(path: Optional[str] = None, profile: Optional[str] = None,
                seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    """
    Loads the experiment configuration with full defaulting.

    Precedence (highest first): explicit arguments (CLI flags), environment
    variables (TRADER_*), the JSON5 config file, the selected profile, built-in defaults.

    Args:
        path (Optional[str]): JSON5 config file; None uses defaults only.
        profile (Optional[str]): 'desk' or 'paper'.
        seed (Optional[int]): Overrides a2c.seed.
        output_dir (Optional[str]): Overrides the run directory.

    Returns:
        ExperimentConfig: The resolved configuration.
    """
    raw: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise MissingFileError(f"config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                raw = json5.load(f)
            except ValueError as e:
                raise InvalidParameterError(f"cannot parse config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise InvalidParameterError(f"config {path} must contain an object at top level")

    profile_name = profile or os.getenv('TRADER_PROFILE') or raw.get('profile') or "desk"
    if profile_name not in PROFILES:
        raise InvalidParameterError(f"unknown profile {profile_name!r}")
    profile_values = PROFILES[profile_name]

    base = ExperimentConfig().to_dict()
    base["a2c"]["total_timesteps"] = profile_values["total_timesteps"]
    merged = _deep_merge(base, raw)
    merged["profile"] = profile_name

    max_assets = profile_values["max_assets"]
    if max_assets is not None:
        merged["tickers"] = list(merged["tickers"])[:max_assets]

    env_source = os.getenv('TRADER_DATA_SOURCE')
    if env_source:
        merged["data_source"] = env_source
    env_output = os.getenv('TRADER_OUTPUT_DIR')
    if env_output:
        merged["output_dir"] = env_output
    if output_dir:
        merged["output_dir"] = output_dir
    if seed is not None:
        merged["a2c"]["seed"] = int(seed)

    config = config_from_dict(merged)
    logger.info("Loaded config (profile=%s, tickers=%s, hash=%s)",
                config.profile, ",".join(config.tickers), config.config_hash()[:12])
    return config
