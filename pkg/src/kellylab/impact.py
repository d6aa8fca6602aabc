"""Execution costs and permanent price impact.

A trade of Y shares over one period executes while the unaffected price moves
linearly from s_start to s_end and the trade itself pushes the price: a
temporary component proportional to the trading rate (eta * Y/dt) and a
permanent component proportional to shares already executed (gamma * y). The
period cost charged on top of the principal leg Y * s_start is the linearized
closed form

    C = Y * [ (1 + (eta/dt) Y) (s_end - s_start) / 2
              + gamma Y (s_end/3 + s_start/6) ]

whose gamma term equals the exact linear-path integral
int_0^dt S_lin(t) * gamma * (Y t / dt) * (Y / dt) dt. With eta = gamma = 0 the
residual C = Y (s_end - s_start) / 2 is the slippage of executing uniformly
through the period instead of instantly at s_start. Permanent impact
accumulates across periods as a per-asset multiplier exp(gamma * y_net)
applied to the unaffected price.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class ImpactParams:
    """eta: temporary impact (price per share/year rate); gamma: permanent
    impact (per share). Both zero disables impact entirely."""

    eta: float
    gamma: float

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class ImpactState:
    """Cumulative permanent-impact factors, one per asset, starting at 1."""

    multipliers: np.ndarray

    def __post_init__(self):
        self.multipliers = np.asarray(self.multipliers, dtype=np.float64)
        if np.any(self.multipliers <= 0):
            raise ValueError("impact multipliers must stay positive")

    @classmethod
    def initial(cls, n_assets: int) -> "ImpactState":
        return cls(np.ones(n_assets, dtype=np.float64))


def trade_cost(s_start, s_end, shares, dt: float, params: ImpactParams):
    """Excess execution cost of trading `shares` over one period of length dt.

    Elementwise over arrays (one cost per asset). Signed: selling (Y < 0)
    mirrors buying in the no-impact limit, C(-Y) = -C(Y).
    """
    s_start = np.asarray(s_start, dtype=np.float64)
    s_end = np.asarray(s_end, dtype=np.float64)
    y = np.asarray(shares, dtype=np.float64)
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    temp = 0.5 * (1.0 + (params.eta / dt) * y) * (s_end - s_start)
    perm = params.gamma * y * (s_end / 3.0 + s_start / 6.0)
    return y * (temp + perm)


def apply_permanent_impact(
    state: ImpactState, shares, params: ImpactParams
) -> ImpactState:
    """Fold one rebalance into the permanent multipliers (new state returned).

    Applied once per period, after the GBM step and before valuation, so the
    multiplier commutes with the scale-invariant future dynamics.
    """
    y = np.asarray(shares, dtype=np.float64)
    return ImpactState(state.multipliers * np.exp(params.gamma * y))
