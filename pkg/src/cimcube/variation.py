"""Device-to-device variation: sampling, tile perturbation, and the
distinguishable-states analysis.

All randomness flows from one experiment seed through named sub-streams
(``numpy.random.SeedSequence`` spawn keys), so runs are bit-identical for
equal seeds regardless of call order elsewhere.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .device_models import InvalidInputError, RramParams, RramState, level_gap_table
from .tile import Tile

__all__ = [
    "VariationSpec",
    "substream",
    "sample_d2d",
    "perturb_tile",
    "distinguishable_states",
    "state_merging_report",
]

# stable sub-stream keys hung off the master seed
STREAM_DEVICE = 1
STREAM_DROPOUT = 2
STREAM_INIT = 3
STREAM_MC = 4


@dataclass(frozen=True)
class VariationSpec:
    sigma_d2d: float = 0.10
    distribution: str = "lognormal"   # or "gaussian-clamped"
    seed: int = 0

    def __post_init__(self):
        if self.sigma_d2d < 0:
            raise InvalidInputError("sigma_d2d must be >= 0")
        if self.distribution not in ("lognormal", "gaussian-clamped"):
            raise InvalidInputError(f"unknown distribution {self.distribution!r}")


def substream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic named sub-stream of the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def sample_d2d(spec: VariationSpec, n: int,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Multiplicative conductance factors; median 1, spread sigma_d2d."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if spec.sigma_d2d == 0:
        return np.ones(n)
    if rng is None:
        rng = substream(spec.seed, STREAM_DEVICE)
    if spec.distribution == "lognormal":
        return np.exp(rng.normal(0.0, spec.sigma_d2d, size=n))
    factors = 1.0 + spec.sigma_d2d * rng.standard_normal(n)
    return np.maximum(factors, 1e-12)


def perturb_tile(tile: Tile, spec: VariationSpec,
                 rng: np.random.Generator | None = None) -> Tile:
    """Resample every cell's d2d factor; nominal gaps and levels untouched."""
    shape = tile.gaps.shape
    factors = sample_d2d(spec, int(np.prod(shape)), rng=rng).reshape(shape)
    return replace(tile, gaps=tile.gaps.copy(), levels=tile.levels.copy(),
                   d2d=factors)


def distinguishable_states(p: RramParams, spec: VariationSpec,
                           v_read: float = 0.5, n_mc: int = 10_000,
                           n_sigma: float = 3.0,
                           return_stats: bool = False):
    """Count resolvable conductance levels under device-to-device spread.

    Monte-Carlo samples the read current of each nominal level over ``n_mc``
    devices, then greedily merges adjacent levels whose distributions overlap:
    level k+1 stays separate only if mu_{k+1} - mu_k > n_sigma*(s_k + s_{k+1}).
    """
    if n_mc < 1_000:
        raise InvalidInputError("need at least 1000 Monte-Carlo devices")
    gaps = level_gap_table(p, v_read=v_read)
    nominal = p.I0 * np.exp(-gaps / p.g0) * np.sinh(v_read / p.V0)
    rng = substream(spec.seed, STREAM_MC)
    factors = sample_d2d(spec, n_mc * p.n_levels, rng=rng).reshape(p.n_levels, n_mc)
    currents = nominal[:, None] * factors
    mu = currents.mean(axis=1)
    sd = currents.std(axis=1)

    groups = np.zeros(p.n_levels, dtype=int)
    for k in range(1, p.n_levels):
        separate = (mu[k] - mu[k - 1]) > n_sigma * (sd[k] + sd[k - 1])
        groups[k] = groups[k - 1] + (1 if separate else 0)
    count = int(groups[-1]) + 1
    if return_stats:
        return count, mu, sd, groups
    return count


def state_merging_report(p: RramParams, spec: VariationSpec,
                         v_read: float = 0.5, n_mc: int = 10_000) -> str:
    """CSV `level,mean_current,std_current,group_id`."""
    _, mu, sd, groups = distinguishable_states(
        p, spec, v_read=v_read, n_mc=n_mc, return_stats=True)
    buf = io.StringIO()
    buf.write("level,mean_current,std_current,group_id\n")
    for k in range(p.n_levels):
        buf.write(f"{k},{mu[k]!r},{sd[k]!r},{groups[k]}\n")
    return buf.getvalue()
