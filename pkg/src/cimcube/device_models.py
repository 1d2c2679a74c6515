"""Compact models for the stacked-nanosheet access transistor and the bi-layer RRAM cell.

The transistor model is a power-law charge-sheet model covering subthreshold
through strong inversion; the memory cell is a filament-gap conduction model
(exponential in gap, sinh in voltage) with sinh-driven gap dynamics for
SET/RESET pulses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "TftParams",
    "RramParams",
    "RramState",
    "InvalidParameterError",
    "InvalidInputError",
    "tft_drain_current",
    "tft_column_current",
    "rram_current",
    "rram_conductance",
    "rram_apply_pulse",
    "level_gap_table",
    "program_to_level",
    "default_staircase_pulses",
    "load_params",
    "reference_tft",
    "reference_rram",
]


class InvalidParameterError(ValueError):
    """A device parameter set violates its invariants."""


class InvalidInputError(ValueError):
    """An operating-point input (voltage, time step, index) is unusable."""


# --------------------------------------------------------------------------
# transistor
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TftParams:
    """Parameters of one nanosheet transistor layer.

    ``omega0`` is the mobility prefactor of the power-law model; its units are
    absorbed so that drain current comes out in amperes (see the shipped
    reference file).
    """

    W: float        # channel width (m)
    L: float        # channel length (m)
    omega0: float   # mobility prefactor
    T: float        # lattice temperature (K)
    Te: float       # characteristic trap temperature (K)
    eps_s: float    # semiconductor permittivity (F/m)
    Ci: float       # gate insulator capacitance per area (F/m^2)
    Vt: float       # threshold voltage (V)
    Vi: float       # thermal-like voltage parameter (V)

    def __post_init__(self):
        vals = (self.W, self.L, self.omega0, self.T, self.Te,
                self.eps_s, self.Ci, self.Vt, self.Vi)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParameterError("non-finite transistor parameter")
        if min(self.W, self.L, self.omega0, self.eps_s, self.Ci) <= 0:
            raise InvalidParameterError("W, L, omega0, eps_s, Ci must be > 0")
        if not (self.Te > self.T / 2 > 0):
            raise InvalidParameterError("requires Te > T/2 > 0")

    @property
    def gamma(self) -> float:
        """Power-law exponent 2*Te/T (> 1 by construction)."""
        return 2.0 * self.Te / self.T

    @property
    def VI(self) -> float:
        """Effective softplus voltage scale Vi*2Te/(2Te - T)."""
        return self.Vi * 2.0 * self.Te / (2.0 * self.Te - self.T)

    @property
    def prefactor(self) -> float:
        return (self.W / self.L) * self.omega0 * (self.T / (2.0 * self.Te)) \
            * (self.eps_s / self.Ci) ** (1.0 - self.gamma)


def _softplus(x):
    """log(1 + exp(x)) without overflow: x + log1p(exp(-x)) for x > 0."""
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0,
                   x + np.log1p(np.exp(-np.abs(x))),
                   np.log1p(np.exp(np.minimum(x, 0.0))))
    if out.ndim == 0:
        return float(out)
    return out


def tft_drain_current(p: TftParams, Vg, Vs, Vd):
    """Drain current of a single nanosheet layer (A).

    Accepts scalars or broadcastable arrays. Antisymmetric under source/drain
    exchange; smooth from subthreshold to strong inversion.
    """
    Vg, Vs, Vd = (np.asarray(v, dtype=float) for v in (Vg, Vs, Vd))
    if any(np.any(~np.isfinite(v)) for v in (Vg, Vs, Vd)):
        raise InvalidInputError("non-finite terminal voltage")
    vgs = (Vg - p.Vt - Vs) / p.VI
    vgd = (Vg - p.Vt - Vd) / p.VI
    # (VI * softplus(x/VI))^gamma evaluated in log space to dodge overflow
    term_s = _charge_term(p, vgs)
    term_d = _charge_term(p, vgd)
    out = p.prefactor * (term_s - term_d)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _charge_term(p: TftParams, x):
    sp = _softplus(x)
    # sp == 0 exactly only in the hard limit; log of 0 is avoided by masking
    sp = np.asarray(sp, dtype=float)
    out = np.zeros_like(sp)
    nz = sp > 0
    out[nz] = np.exp(p.gamma * (np.log(p.VI) + np.log(sp[nz])))
    if out.ndim == 0:
        return float(out)
    return out


def tft_column_current(p: TftParams, gate_voltages, Vs, Vd) -> float:
    """Current of one column cell: sum over its 8 stacked layers."""
    gv = np.asarray(gate_voltages, dtype=float)
    if gv.shape != (8,):
        raise InvalidInputError(f"expected 8 gate voltages, got shape {gv.shape}")
    return float(np.sum(tft_drain_current(p, gv, Vs, Vd)))


# --------------------------------------------------------------------------
# memory cell
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RramParams:
    """Filament-gap conduction and switching parameters of the bi-layer cell."""

    I0: float               # current prefactor (A)
    g0: float               # gap attenuation length (m)
    V0: float               # voltage scale of conduction (V)
    gap_min: float          # fully formed filament (m)
    gap_max: float          # fully ruptured filament (m)
    set_rate: float         # gap closing velocity prefactor (m/s)
    reset_rate: float       # gap opening velocity prefactor (m/s)
    field_scale_set: float  # voltage scale of SET dynamics (V)
    field_scale_reset: float
    n_levels: int = 32      # nominal programmable level count

    def __post_init__(self):
        if min(self.I0, self.g0, self.V0) <= 0:
            raise InvalidParameterError("I0, g0, V0 must be > 0")
        if not (0 < self.gap_min < self.gap_max):
            raise InvalidParameterError("requires 0 < gap_min < gap_max")
        if self.n_levels < 2:
            raise InvalidParameterError("n_levels must be >= 2")

    @property
    def on_off_ratio(self) -> float:
        """Nominal read-current ratio between gap_min and gap_max."""
        return math.exp((self.gap_max - self.gap_min) / self.g0)


@dataclass(frozen=True)
class RramState:
    """Conduction state of one memory cell."""

    gap: float              # filament gap (m)
    level: int = 0          # nominal programmed level index
    d2d_factor: float = 1.0  # multiplicative device-to-device factor

    def __post_init__(self):
        if self.d2d_factor <= 0:
            raise InvalidParameterError("d2d_factor must be > 0")


def rram_current(p: RramParams, s: RramState, V) -> float:
    """Cell current I = d2d * I0 * exp(-gap/g0) * sinh(V/V0); odd in V."""
    if not (p.gap_min <= s.gap <= p.gap_max):
        raise InvalidParameterError("gap outside [gap_min, gap_max]")
    V = np.asarray(V, dtype=float)
    out = s.d2d_factor * p.I0 * math.exp(-s.gap / p.g0) * np.sinh(V / p.V0)
    if np.ndim(out) == 0:
        return float(out)
    return out


def rram_conductance(p: RramParams, s: RramState, v_read: float) -> float:
    """Secant conductance I(v_read)/v_read at the read point (S)."""
    return rram_current(p, s, v_read) / v_read


def rram_apply_pulse(p: RramParams, s: RramState, V: float, dt: float) -> RramState:
    """Evolve the filament gap under one voltage pulse.

    Positive V closes the gap (SET), negative V opens it (RESET). Explicit
    Euler with substeps capped so a single step never moves the gap by more
    than 1e-4 of the physical range; the gap is clamped to its bounds.
    """
    if dt <= 0:
        raise InvalidInputError("pulse width must be > 0")
    if V == 0:
        return s
    if V > 0:
        rate = -p.set_rate * math.sinh(V / p.field_scale_set)
    else:
        rate = p.reset_rate * math.sinh(abs(V) / p.field_scale_reset)
    max_step = (p.gap_max - p.gap_min) * 1e-4
    n_sub = max(1, int(math.ceil(abs(rate) * dt / max_step)))
    h = dt / n_sub
    gap = s.gap
    for _ in range(n_sub):
        gap = min(max(gap + rate * h, p.gap_min), p.gap_max)
    return replace(s, gap=gap)


def default_staircase_pulses(n: int = 31) -> list[tuple[float, float]]:
    """The calibrated identical SET pulse train used for the level staircase.

    From gap_max, 31 pulses produce 32 strictly monotone gap values with the
    reference parameters (the last level stops just short of gap_min).
    """
    return [(2.0, 9e-9)] * n


def level_gap_table(p: RramParams, v_read: float = 0.5,
                    scheme: str = "uniform-conductance") -> np.ndarray:
    """Monotone gap per nominal level, level 0 = gap_max (lowest conductance).

    ``uniform-conductance`` spaces the read currents linearly between the
    gap_max and gap_min endpoints and inverts the conduction law analytically;
    ``uniform-gap`` spaces the gap itself linearly.
    """
    n = p.n_levels
    if scheme == "uniform-gap":
        return np.linspace(p.gap_max, p.gap_min, n)
    if scheme != "uniform-conductance":
        raise InvalidInputError(f"unknown level scheme {scheme!r}")
    sinh = math.sinh(v_read / p.V0)
    i_lo = p.I0 * math.exp(-p.gap_max / p.g0) * sinh
    i_hi = p.I0 * math.exp(-p.gap_min / p.g0) * sinh
    currents = np.linspace(i_lo, i_hi, n)
    gaps = -p.g0 * np.log(currents / (p.I0 * sinh))
    # analytic inversion; pin the endpoints exactly against rounding
    gaps[0] = p.gap_max
    gaps[-1] = p.gap_min
    return gaps


def program_to_level(p: RramParams, level: int,
                     scheme: str = "uniform-conductance",
                     v_read: float = 0.5) -> RramState:
    """Closed-form placement of a nominal level, bypassing pulse iteration."""
    if not 0 <= level < p.n_levels:
        raise IndexError(f"level {level} outside 0..{p.n_levels - 1}")
    gap = float(level_gap_table(p, v_read=v_read, scheme=scheme)[level])
    return RramState(gap=gap, level=level)


# --------------------------------------------------------------------------
# parameter files
# --------------------------------------------------------------------------


def load_params(path) -> dict[str, float]:
    """Parse a `name = value` device parameter file (SI units, # comments)."""
    out: dict[str, float] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected 'name = value'")
        name, value = (part.strip() for part in line.split("=", 1))
        try:
            out[name] = float(value)
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: bad number {value!r}") from exc
    return out


def _data_file(name: str) -> Path:
    return Path(resources.files("cimcube").joinpath("data", name))


def reference_tft(path=None) -> TftParams:
    """The shipped reference transistor parameter set."""
    raw = load_params(path or _data_file("tft_reference.params"))
    return TftParams(**raw)


def reference_rram(path=None) -> RramParams:
    """The shipped reference memory-cell parameter set."""
    raw = load_params(path or _data_file("rram_reference.params"))
    n = raw.pop("n_levels", 32)
    return RramParams(n_levels=int(n), **raw)


# gate drive convention shared by the tile simulator: a selected layer is
# driven one volt above threshold, a deselected layer sits at 0 V
GATE_ON_OVERDRIVE = 1.0


def gate_on_voltage(p: TftParams) -> float:
    return p.Vt + GATE_ON_OVERDRIVE


def gate_off_voltage(p: TftParams) -> float:
    return 0.0
