"""Canonical experiment presets, mirrored one-to-one by the files in configs/.

Three markets ship with the package: a three-ETF single-regime market (growth
stocks / value stocks / gold), a two-regime bull/bear index market, and a
one-asset toy used for fast learning checks. All share the execution-cost
coefficients and episode geometry of the shipped experiments.
"""

import numpy as np

from .analytic import stationary_distribution
from .config import BaselineConfig, ExperimentConfig, QSurfaceConfig, RunConfig
from .env import EnvConfig
from .hmm import HmmFitConfig
from .impact import ImpactParams
from .market import MarketParams, RegimeModel
from .rl import TrainConfig

# shared episode geometry: 5 years at 256 periods/year, 60-period window
HORIZON_YEARS = 5.0
PERIODS_PER_YEAR = 256
WINDOW = 60
INITIAL_WEALTH = 1000.0

REGIME_TRANSITION = ((0.997, 0.003), (0.009, 0.991))


def default_impact() -> ImpactParams:
    return ImpactParams(eta=1e-9, gamma=1e-7)


def etf3_market() -> MarketParams:
    """Growth/value/gold ETF triple, annual parameters, 4% cash."""
    return MarketParams(
        mu=(0.124, 0.105, 0.072),
        sigma=(0.255, 0.209, 0.145),
        corr=(
            (1.0, 0.81, 0.12),
            (0.81, 1.0, 0.08),
            (0.12, 0.08, 1.0),
        ),
        cash_rate=0.04,
    )


def bull_market() -> MarketParams:
    return MarketParams(
        mu=(0.103, 0.138, 0.140),
        sigma=(0.120, 0.166, 0.166),
        corr=(
            (1.0, 0.41, 0.26),
            (0.41, 1.0, 0.43),
            (0.26, 0.43, 1.0),
        ),
        cash_rate=0.05,
    )


def bear_market() -> MarketParams:
    return MarketParams(
        mu=(-0.021, 0.097, 0.042),
        sigma=(0.216, 0.379, 0.288),
        corr=(
            (1.0, 0.60, 0.45),
            (0.60, 1.0, 0.45),
            (0.45, 0.45, 1.0),
        ),
        cash_rate=0.01,
    )


def regime_model() -> RegimeModel:
    """Bull/bear chain started from its stationary distribution."""
    transition = np.asarray(REGIME_TRANSITION)
    return RegimeModel(
        [bull_market(), bear_market()],
        transition,
        stationary_distribution(transition),
    )


def single_asset_market() -> MarketParams:
    return MarketParams(mu=(0.12,), sigma=(0.2,), corr=((1.0,),), cash_rate=0.04)


def two_asset_market() -> MarketParams:
    """First two ETF assets, for growth-surface plots."""
    return MarketParams(
        mu=(0.124, 0.105),
        sigma=(0.255, 0.209),
        corr=((1.0, 0.81), (0.81, 1.0)),
        cash_rate=0.04,
    )


def _env(market: RegimeModel, horizon_years=HORIZON_YEARS) -> EnvConfig:
    return EnvConfig(
        horizon_years=horizon_years,
        periods_per_year=PERIODS_PER_YEAR,
        window=WINDOW,
        initial_wealth=INITIAL_WEALTH,
        market=market,
        impact=default_impact(),
        discount=0.99,
    )


def etf3(total_steps: int = 2_000_000) -> ExperimentConfig:
    """Three-ETF PPO experiment at full scale (the long-run recipe)."""
    return ExperimentConfig(
        env=_env(RegimeModel.single(etf3_market())),
        algo=TrainConfig.ppo(total_steps),
        context_policy=False,
        hmm=HmmFitConfig(),
        run=RunConfig(seeds=tuple(range(10)), eval_episodes=400),
        baseline=BaselineConfig(use_true_regime=False),
    )


def regimes3(total_steps: int = 2_000_000) -> ExperimentConfig:
    """Bull/bear index experiment with the context-conditioned policy."""
    return ExperimentConfig(
        env=_env(regime_model()),
        algo=TrainConfig.ppo(total_steps),
        context_policy=True,
        hmm=HmmFitConfig(),
        run=RunConfig(seeds=tuple(range(10)), eval_episodes=400),
        baseline=BaselineConfig(
            fraction=1.0,
            adjustment_periods=1,
            use_true_regime=True,
            episodes_per_cell=20,
            fractions=tuple(round(0.1 * k, 1) for k in range(1, 11)),
            adjustment_grid=(1, 2, 4, 8, 16, 32, 64),
        ),
    )


def single_asset(total_steps: int = 200_000) -> ExperimentConfig:
    """One-asset learning check: 1-year episodes, PPO defaults, 3 seeds."""
    return ExperimentConfig(
        env=_env(RegimeModel.single(single_asset_market()), horizon_years=1.0),
        algo=TrainConfig.ppo(total_steps),
        context_policy=False,
        hmm=HmmFitConfig(),
        run=RunConfig(seeds=(0, 1, 2), eval_episodes=400),
        baseline=BaselineConfig(use_true_regime=False),
    )


def two_asset() -> ExperimentConfig:
    """Two-asset market with a growth-surface grid block."""
    return ExperimentConfig(
        env=_env(RegimeModel.single(two_asset_market())),
        algo=TrainConfig.ppo(1280),
        context_policy=False,
        hmm=HmmFitConfig(),
        run=RunConfig(seeds=(0,), eval_episodes=20),
        baseline=BaselineConfig(use_true_regime=False),
        qsurface=QSurfaceConfig(w_min=-1.0, w_max=3.0, steps=41),
    )


PRESETS = {
    "etf3": etf3,
    "regimes3": regimes3,
    "single_asset": single_asset,
    "two_asset": two_asset,
}
