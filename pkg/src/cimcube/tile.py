"""Single-tile simulator: 8x8 column cells, each a stack of 8 1T1R layers.

Each branch is an access transistor in series with a memory cell between a
bit line and a select line; word lines gate the stacked layers. DC operating
points only. The WRITE switch matrix is behavioral: a write addresses exactly
one cell.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .device_models import (
    InvalidInputError,
    RramParams,
    RramState,
    TftParams,
    gate_off_voltage,
    gate_on_voltage,
    rram_apply_pulse,
    rram_current,
    tft_drain_current,
)

__all__ = [
    "TileGeometry",
    "Tile",
    "ReadStimulus",
    "ConvergenceError",
    "solve_branch",
    "ideal_mac",
    "mac_with_ir_drop",
    "write_cell",
    "tile_static_power",
    "save_tile",
    "load_tile",
    "tile_to_csv",
]

MAX_WRITE_VOLTAGE = 2.0  # V, write budget of the switch matrix


class ConvergenceError(RuntimeError):
    """The nonlinear network solve did not converge; carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class TileGeometry:
    n_rows: int = 8
    n_cols: int = 8
    n_layers: int = 8
    r_wl: float = 2.5   # per-segment wire resistance (ohm)
    r_bl: float = 2.5
    r_sl: float = 2.5

    def __post_init__(self):
        if min(self.n_rows, self.n_cols, self.n_layers) < 1:
            raise InvalidInputError("tile dimensions must be >= 1")
        if min(self.r_wl, self.r_bl, self.r_sl) < 0:
            raise InvalidInputError("wire resistances must be >= 0")


@dataclass(frozen=True)
class Tile:
    """Immutable tile snapshot.

    Cell state is stored as dense arrays of shape (n_rows, n_cols, n_layers):
    filament gap, nominal level, and device-to-device factor.
    """

    geometry: TileGeometry
    tft: TftParams
    rram: RramParams
    gaps: np.ndarray
    levels: np.ndarray
    d2d: np.ndarray

    def __post_init__(self):
        shape = (self.geometry.n_rows, self.geometry.n_cols, self.geometry.n_layers)
        for name in ("gaps", "levels", "d2d"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidInputError(f"{name} shape {arr.shape} != {shape}")
        if np.any(self.gaps < self.rram.gap_min) or np.any(self.gaps > self.rram.gap_max):
            raise InvalidInputError("gap outside physical bounds")
        if np.any(self.d2d <= 0):
            raise InvalidInputError("d2d factors must be > 0")
        self.gaps.setflags(write=False)
        self.levels.setflags(write=False)
        self.d2d.setflags(write=False)

    @classmethod
    def uniform(cls, geometry: TileGeometry, tft: TftParams, rram: RramParams,
                state: RramState) -> "Tile":
        shape = (geometry.n_rows, geometry.n_cols, geometry.n_layers)
        return cls(geometry, tft, rram,
                   gaps=np.full(shape, state.gap),
                   levels=np.full(shape, state.level, dtype=np.int32),
                   d2d=np.full(shape, state.d2d_factor))

    def cell(self, row: int, col: int, layer: int) -> RramState:
        return RramState(gap=float(self.gaps[row, col, layer]),
                         level=int(self.levels[row, col, layer]),
                         d2d_factor=float(self.d2d[row, col, layer]))


@dataclass(frozen=True)
class ReadStimulus:
    """One read cycle: per-row input bits, per-layer gate selects, read voltage."""

    input_bits: tuple
    layer_select: tuple
    v_read: float = 0.5

    def __post_init__(self):
        if self.v_read <= 0:
            raise InvalidInputError("v_read must be > 0")

    def check(self, geom: TileGeometry):
        if len(self.input_bits) != geom.n_rows:
            raise InvalidInputError(
                f"expected {geom.n_rows} input bits, got {len(self.input_bits)}")
        if len(self.layer_select) != geom.n_layers:
            raise InvalidInputError(
                f"expected {geom.n_layers} layer selects, got {len(self.layer_select)}")


def solve_branch(tft: TftParams, state: RramState, rram: RramParams,
                 v_applied: float, gate_on: bool) -> float:
    """Current of one series 1T1R branch at a terminal voltage (A).

    Bisects on the intermediate node: transistor from the driven terminal down
    to the node, cell from the node to ground. Both elements are monotone, so
    the bracket [0, v_applied] always contains exactly one crossing.
    """
    if v_applied < 0:
        raise InvalidInputError("v_applied must be >= 0")
    if v_applied == 0:
        return 0.0
    vg = gate_on_voltage(tft) if gate_on else gate_off_voltage(tft)

    def mismatch(vm):
        return tft_drain_current(tft, vg, vm, v_applied) - rram_current(rram, state, vm)

    lo, hi = mismatch(0.0), mismatch(v_applied)
    if lo < 0 or hi > 0:
        raise ConvergenceError("no sign change bracketing the branch operating point")
    if lo == 0.0:
        return 0.0
    vm = brentq(mismatch, 0.0, v_applied, xtol=1e-18, rtol=8.9e-16)
    return rram_current(rram, state, vm)


def _branch_current_tile(tile: Tile, stim: ReadStimulus, v: float,
                         row: int, col: int, layer: int) -> float:
    on = bool(stim.input_bits[row]) and bool(stim.layer_select[layer])
    return solve_branch(tile.tft, tile.cell(row, col, layer), tile.rram, v, on)


def ideal_mac(tile: Tile, stim: ReadStimulus) -> np.ndarray:
    """Per-column output current with zero wire resistance (A)."""
    stim.check(tile.geometry)
    g = tile.geometry
    out = np.zeros(g.n_cols)
    for col in range(g.n_cols):
        acc = 0.0
        for row in range(g.n_rows):
            for layer in range(g.n_layers):
                acc += _branch_current_tile(tile, stim, stim.v_read, row, col, layer)
        out[col] = acc
    return out


def _solve_branch_grid(tft: TftParams, rram: RramParams, gaps, d2d, on,
                       grid) -> np.ndarray:
    """Vectorized series solve: current of shape (n_cells, n_grid).

    Bisection on the intermediate node voltage, all cells and grid points at
    once; 90 halvings pin the node voltage to well below double precision.
    """
    gaps = np.asarray(gaps, dtype=float).reshape(-1, 1)
    d2d = np.asarray(d2d, dtype=float).reshape(-1, 1)
    on = np.asarray(on, dtype=bool).reshape(-1, 1)
    grid = np.asarray(grid, dtype=float).reshape(1, -1)
    vg = np.where(on, gate_on_voltage(tft), gate_off_voltage(tft))
    pref = d2d * rram.I0 * np.exp(-gaps / rram.g0)

    lo = np.zeros(np.broadcast_shapes(gaps.shape[:1] + (grid.shape[1],)))
    hi = np.broadcast_to(grid, lo.shape).copy()
    for _ in range(90):
        vm = 0.5 * (lo + hi)
        mism = tft_drain_current(tft, vg, vm, grid) - pref * np.sinh(vm / rram.V0)
        above = mism > 0
        lo = np.where(above, vm, lo)
        hi = np.where(above, hi, vm)
    vm = 0.5 * (lo + hi)
    return pref * np.sinh(vm / rram.V0)


def _cell_branch_factory(tile: Tile, stim: ReadStimulus, v_max: float):
    """Default nonlinear branch model: stacked 1T1R layers in parallel.

    Per-cell stack currents are tabulated on a voltage grid with a vectorized
    bisection and interpolated monotonically inside the network iteration.
    """
    from scipy.interpolate import PchipInterpolator

    g = tile.geometry
    grid = np.linspace(0.0, v_max, 65)
    on = np.zeros((g.n_rows, g.n_cols, g.n_layers), dtype=bool)
    for row in range(g.n_rows):
        for layer in range(g.n_layers):
            on[row, :, layer] = bool(stim.input_bits[row]) and bool(stim.layer_select[layer])
    table = _solve_branch_grid(tile.tft, tile.rram,
                               tile.gaps.ravel(), tile.d2d.ravel(),
                               on.ravel(), grid)
    table = table.reshape(g.n_rows, g.n_cols, g.n_layers, grid.size).sum(axis=2)
    splines = [[PchipInterpolator(grid, table[i, j])
                for j in range(g.n_cols)] for i in range(g.n_rows)]

    def branch(row, col, dv):
        if dv <= 0:
            return 0.0
        return float(splines[row][col](dv))

    return branch


def mac_with_ir_drop(tile: Tile, stim: ReadStimulus, branch_model=None,
                     tol_v: float = 1e-9, tol_i: float = 1e-13,
                     max_iter: int = 10_000):
    """Column currents and node voltages with parasitic wire resistance.

    Wires are chains of per-segment resistors: every row's bit line is driven
    at v_read from the column-0 end, every column's select line collects to
    ground at the row-0 end. The cell between bit-line node (i, j) and
    select-line node (i, j) is the nonlinear parallel stack of its layers.

    Damped fixed point: branches are replaced by their secant conductance
    through the origin, the linear nodal system is solved, and the voltages
    are relaxed with factor 0.5 until the update is below ``tol_v`` and the
    true-branch nodal current residual is below ``tol_i``.

    Returns ``(column_currents, nodes)`` where ``nodes`` maps ``("bl", i, j)``
    and ``("sl", i, j)`` to voltages.
    """
    stim.check(tile.geometry)
    g = tile.geometry
    n_r, n_c = g.n_rows, g.n_cols
    v = stim.v_read

    if branch_model is None and g.r_bl == 0 and g.r_sl == 0:
        # degenerate network: full drive across every cell
        cols = ideal_mac(tile, stim)
        nodes = {}
        for i in range(n_r):
            for j in range(n_c):
                nodes[("bl", i, j)] = v
                nodes[("sl", i, j)] = 0.0
        return cols, nodes

    if branch_model is None:
        branch_model = _cell_branch_factory(tile, stim, v)

    nb = n_r * n_c  # bit-line node count; same for select-line nodes
    G_STIFF = 1e9   # stands in for an ideal wire segment
    g_bl = G_STIFF if g.r_bl == 0 else 1.0 / g.r_bl
    g_sl = G_STIFF if g.r_sl == 0 else 1.0 / g.r_sl

    def bl_idx(i, j):
        return i * n_c + j

    def sl_idx(i, j):
        return nb + i * n_c + j

    n_nodes = 2 * nb
    # wire stamps do not change between iterations
    A_wire = np.zeros((n_nodes, n_nodes))
    rhs = np.zeros(n_nodes)

    def stamp(A, a, b, cond):
        A[a, a] += cond
        A[b, b] += cond
        A[a, b] -= cond
        A[b, a] -= cond

    for i in range(n_r):
        A_wire[bl_idx(i, 0), bl_idx(i, 0)] += g_bl
        rhs[bl_idx(i, 0)] += g_bl * v
        for j in range(1, n_c):
            stamp(A_wire, bl_idx(i, j - 1), bl_idx(i, j), g_bl)
    for j in range(n_c):
        A_wire[sl_idx(0, j), sl_idx(0, j)] += g_sl
        for i in range(1, n_r):
            stamp(A_wire, sl_idx(i - 1, j), sl_idx(i, j), g_sl)

    # initial guess: bit lines at full drive, select lines at ground
    vb = np.full(nb, v)
    vs = np.zeros(nb)
    trace = []

    def branch_currents(vb, vs):
        cur = np.zeros((n_r, n_c))
        for i in range(n_r):
            for j in range(n_c):
                dv = vb[bl_idx(i, j)] - vs[sl_idx(i, j) - nb]
                cur[i, j] = branch_model(i, j, max(dv, 0.0))
        return cur

    for it in range(max_iter):
        A = A_wire.copy()
        cur = branch_currents(vb, vs)
        for i in range(n_r):
            for j in range(n_c):
                dv = max(vb[bl_idx(i, j)] - vs[sl_idx(i, j) - nb], 1e-12)
                stamp(A, bl_idx(i, j), sl_idx(i, j), cur[i, j] / dv)

        x = np.linalg.solve(A, rhs)
        new_vb, new_vs = x[:nb], x[nb:]
        dmax = max(np.max(np.abs(new_vb - vb)), np.max(np.abs(new_vs - vs)))
        damp = 0.5
        vb = vb + damp * (new_vb - vb)
        vs = vs + damp * (new_vs - vs)

        cur = branch_currents(vb, vs)
        res = _kcl_residual(g, vb, vs, cur, g_bl, g_sl, v)
        trace.append((it, dmax, res))
        if dmax < tol_v and res < tol_i:
            cols = g_sl * vs.reshape(n_r, n_c)[0, :]  # current into the ground end
            nodes = {}
            for i in range(n_r):
                for j in range(n_c):
                    nodes[("bl", i, j)] = float(vb[bl_idx(i, j)])
                    nodes[("sl", i, j)] = float(vs[sl_idx(i, j) - nb])
            return cols, nodes
    raise ConvergenceError(
        f"network solve did not converge in {max_iter} iterations", trace)


def _kcl_residual(g, vb, vs, cur, g_bl, g_sl, v) -> float:
    """Max absolute nodal current mismatch using the true branch currents."""
    n_r, n_c = g.n_rows, g.n_cols
    vb2 = vb.reshape(n_r, n_c)
    vs2 = vs.reshape(n_r, n_c)
    res = 0.0
    for i in range(n_r):
        for j in range(n_c):
            # bit-line node
            acc = -cur[i, j]
            if j == 0:
                acc += g_bl * (v - vb2[i, 0])
            else:
                acc += g_bl * (vb2[i, j - 1] - vb2[i, j])
            if j + 1 < n_c:
                acc += g_bl * (vb2[i, j + 1] - vb2[i, j])
            res = max(res, abs(acc))
            # select-line node
            acc = cur[i, j]
            if i == 0:
                acc += g_sl * (0.0 - vs2[0, j])
            else:
                acc += g_sl * (vs2[i - 1, j] - vs2[i, j])
            if i + 1 < n_r:
                acc += g_sl * (vs2[i + 1, j] - vs2[i, j])
            res = max(res, abs(acc))
    return res


def write_cell(tile: Tile, row: int, col: int, layer: int,
               pulse_train) -> Tile:
    """Apply a pulse train to one addressed cell; all other cells untouched."""
    g = tile.geometry
    if not (0 <= row < g.n_rows and 0 <= col < g.n_cols and 0 <= layer < g.n_layers):
        raise InvalidInputError(f"cell index ({row}, {col}, {layer}) out of range")
    for volts, _ in pulse_train:
        if abs(volts) > MAX_WRITE_VOLTAGE:
            raise InvalidInputError(
                f"write pulse {volts} V exceeds the {MAX_WRITE_VOLTAGE} V budget")
    state = tile.cell(row, col, layer)
    for volts, width in pulse_train:
        state = rram_apply_pulse(tile.rram, state, volts, width)
    gaps = tile.gaps.copy()
    gaps[row, col, layer] = state.gap
    return replace(tile, gaps=gaps, levels=tile.levels.copy(), d2d=tile.d2d.copy())


def tile_static_power(tile: Tile, stim: ReadStimulus) -> float:
    """Static power of the tile under a read stimulus (W)."""
    cols, _ = mac_with_ir_drop(tile, stim)
    return float(np.sum(cols) * stim.v_read)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

_MAGIC = b"CIMT"
_VERSION = 1


def save_tile(tile: Tile, path) -> None:
    """Self-describing binary snapshot: magic, version, geometry, cell arrays."""
    g = tile.geometry
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<3I3d", g.n_rows, g.n_cols, g.n_layers,
                            g.r_wl, g.r_bl, g.r_sl))
        f.write(tile.gaps.astype("<f8").tobytes())
        f.write(tile.levels.astype("<i4").tobytes())
        f.write(tile.d2d.astype("<f8").tobytes())


def load_tile(path, tft: TftParams, rram: RramParams) -> Tile:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise InvalidInputError(f"bad magic {magic!r} at offset 0")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _VERSION:
            raise InvalidInputError(f"unsupported tile container version {version}")
        n_r, n_c, n_l, r_wl, r_bl, r_sl = struct.unpack("<3I3d", f.read(36))
        geom = TileGeometry(n_r, n_c, n_l, r_wl, r_bl, r_sl)
        count = n_r * n_c * n_l
        gaps = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(n_r, n_c, n_l)
        levels = np.frombuffer(f.read(4 * count), dtype="<i4").reshape(n_r, n_c, n_l)
        d2d = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(n_r, n_c, n_l)
    return Tile(geom, tft, rram, gaps.copy(), levels.copy(), d2d.copy())


def tile_to_csv(tile: Tile) -> str:
    """Human-inspectable dump: one row per cell."""
    buf = io.StringIO()
    buf.write("row,col,layer,gap,level,d2d_factor\n")
    g = tile.geometry
    for i in range(g.n_rows):
        for j in range(g.n_cols):
            for k in range(g.n_layers):
                buf.write(f"{i},{j},{k},{float(tile.gaps[i, j, k])!r},"
                          f"{int(tile.levels[i, j, k])},{float(tile.d2d[i, j, k])!r}\n")
    return buf.getvalue()
