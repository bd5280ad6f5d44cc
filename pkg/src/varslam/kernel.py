"""Barron's general robust loss, its derivative and IRLS weight, and the
truncated partition function used for shape estimation.

All functions accept scalars or numpy arrays for the residual magnitude ``e``
and return the same shape. ``alpha`` and ``c`` are scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import IO, Tuple

import numpy as np

from .errors import InvalidArgumentError

BRANCH_EPS = 1e-9

DEFAULT_TAU = 10.0
DEFAULT_QUAD_NODES = 2000


@dataclass(frozen=True)
class KernelParams:
    alpha: float
    c: float = 1.0

    def __post_init__(self):
        _check_params(self.alpha, self.c)


def _check_params(alpha: float, c: float) -> None:
    if not (math.isfinite(alpha) and math.isfinite(c)):
        raise InvalidArgumentError(f"kernel parameters must be finite (alpha={alpha}, c={c})")
    if c <= 0:
        raise InvalidArgumentError(f"scale c must be positive, got {c}")
    if alpha > 2 + BRANCH_EPS:
        raise InvalidArgumentError(f"shape alpha must be <= 2, got {alpha}")


def _prepare(e, alpha, c):
    _check_params(alpha, c)
    arr = np.asarray(e, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("residual magnitude must be finite")
    return arr


def _unwrap(out, e):
    return float(out) if np.ndim(e) == 0 else out


def rho(e, alpha: float, c: float = 1.0, *, welsch: bool = False):
    """Barron loss rho(e; alpha, c).

    The quadratic (alpha=2) and Cauchy (alpha=0) cases are evaluated in closed
    form within ``BRANCH_EPS``. ``welsch=True`` evaluates the alpha -> -inf
    limit and ignores ``alpha``.
    """
    arr = _prepare(e, alpha, c)
    x = (arr / c) ** 2
    if welsch:
        out = -np.expm1(-0.5 * x)
    elif abs(alpha - 2.0) < BRANCH_EPS:
        out = 0.5 * x
    elif abs(alpha) < BRANCH_EPS:
        out = np.log1p(0.5 * x)
    else:
        b = abs(alpha - 2.0)
        # (x/b + 1)^(alpha/2) - 1 via expm1/log1p keeps precision near e = 0
        out = (b / alpha) * np.expm1(0.5 * alpha * np.log1p(x / b))
    return _unwrap(out, e)


def weight(e, alpha: float, c: float = 1.0, *, welsch: bool = False):
    """IRLS weight drho/de / e, equal to 1/c^2 at e = 0."""
    arr = _prepare(e, alpha, c)
    x = (arr / c) ** 2
    inv_c2 = 1.0 / (c * c)
    if welsch:
        out = inv_c2 * np.exp(-0.5 * x)
    elif abs(alpha - 2.0) < BRANCH_EPS:
        out = np.full_like(x, inv_c2)
    elif abs(alpha) < BRANCH_EPS:
        out = inv_c2 / (0.5 * x + 1.0)
    else:
        b = abs(alpha - 2.0)
        out = inv_c2 * np.exp((0.5 * alpha - 1.0) * np.log1p(x / b))
    return _unwrap(out, e)


def drho_de(e, alpha: float, c: float = 1.0, *, welsch: bool = False):
    """Derivative of :func:`rho` with respect to the magnitude."""
    w = weight(e, alpha, c, welsch=welsch)
    return _unwrap(np.asarray(w) * np.asarray(e, dtype=float), e)


# ---------------------------------------------------------------------------
# partition function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlphaGrid:
    min: float = -10.0
    max: float = 2.0
    step: float = 0.1

    def __post_init__(self):
        if not (self.min < self.max and self.step > 0):
            raise InvalidArgumentError(f"invalid alpha grid {self}")
        count = (self.max - self.min) / self.step
        if abs(count - round(count)) > 1e-9:
            raise InvalidArgumentError(
                f"grid span {self.max - self.min} is not a whole number of steps {self.step}")

    @property
    def size(self) -> int:
        return int(round((self.max - self.min) / self.step)) + 1

    @property
    def nodes(self) -> np.ndarray:
        # rounded so that nodes like 1.0 and 2.0 are exact
        return np.round(self.min + self.step * np.arange(self.size), 10)

    def snap(self, alpha: float) -> Tuple[int, bool]:
        """Nearest node index (ties round up) and whether clamping occurred."""
        if not math.isfinite(alpha):
            raise InvalidArgumentError(f"alpha must be finite, got {alpha}")
        pos = (alpha - self.min) / self.step
        # absorb representation error so 0.95 -> 1.0 rather than 0.9
        idx = math.floor(round(pos, 9) + 0.5)
        clamped = idx < 0 or idx > self.size - 1
        return min(max(idx, 0), self.size - 1), clamped


def _simpson_weights(n: int, h: float) -> np.ndarray:
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


def log_partition(alpha: float, tau: float = DEFAULT_TAU,
                  quad_nodes: int = DEFAULT_QUAD_NODES) -> float:
    """log of the integral of exp(-rho(x; alpha, 1)) over [-tau, tau].

    Composite Simpson rule with ``quad_nodes`` subintervals.
    """
    if not (math.isfinite(tau) and tau > 0):
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    if int(quad_nodes) != quad_nodes or quad_nodes < 16 or quad_nodes % 2:
        raise InvalidArgumentError(f"quad_nodes must be an even integer >= 16, got {quad_nodes}")
    n = int(quad_nodes)
    xs = np.linspace(-tau, tau, n + 1)
    vals = np.exp(-rho(xs, alpha, 1.0))
    return float(np.log(np.dot(_simpson_weights(n, 2.0 * tau / n), vals)))


@dataclass(frozen=True)
class PartitionTable:
    grid: AlphaGrid
    log_z: np.ndarray = field(repr=False)
    tau: float = DEFAULT_TAU
    quad_nodes: int = DEFAULT_QUAD_NODES

    def __post_init__(self):
        if self.log_z.shape != (self.grid.size,):
            raise InvalidArgumentError(
                f"table has {self.log_z.shape} entries, grid has {self.grid.size} nodes")
        if not np.all(np.isfinite(self.log_z)):
            raise InvalidArgumentError("partition table contains non-finite values")
        self.log_z.setflags(write=False)

    @property
    def alphas(self) -> np.ndarray:
        return self.grid.nodes


_build_count = 0


def partition_table_builds() -> int:
    """Number of tables built in this process (instrumentation counter)."""
    return _build_count


def build_partition_table(grid: AlphaGrid = AlphaGrid(), tau: float = DEFAULT_TAU,
                          quad_nodes: int = DEFAULT_QUAD_NODES) -> PartitionTable:
    global _build_count
    log_z = np.array([log_partition(a, tau, quad_nodes) for a in grid.nodes])
    _build_count += 1
    return PartitionTable(grid, log_z, float(tau), int(quad_nodes))


@lru_cache(maxsize=None)
def get_partition_table(grid: AlphaGrid = AlphaGrid(), tau: float = DEFAULT_TAU,
                        quad_nodes: int = DEFAULT_QUAD_NODES) -> PartitionTable:
    """Process-wide table for a configuration; built on first request only."""
    return build_partition_table(grid, float(tau), int(quad_nodes))


def lookup_log_partition(table: PartitionTable, alpha: float) -> float:
    idx, _ = table.grid.snap(alpha)
    return float(table.log_z[idx])


def dump_partition_table(table: PartitionTable, stream: IO[str]) -> None:
    """Write ``alpha log_z`` pairs, one per line, under a '#' header."""
    g = table.grid
    stream.write(f"# tau={table.tau!r} quad_nodes={table.quad_nodes} "
                 f"grid_min={g.min!r} grid_max={g.max!r} grid_step={g.step!r}\n")
    for a, lz in zip(g.nodes, table.log_z):
        stream.write(f"{a:.10g} {lz:.17g}\n")


def load_partition_table(stream: IO[str]) -> PartitionTable:
    header = {}
    alphas, values = [], []
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                header[key] = val
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise InvalidArgumentError(f"line {lineno}: expected two columns")
        alphas.append(float(parts[0]))
        values.append(float(parts[1]))
    try:
        grid = AlphaGrid(float(header["grid_min"]), float(header["grid_max"]),
                         float(header["grid_step"]))
        tau = float(header["tau"])
        quad_nodes = int(header["quad_nodes"])
    except KeyError as exc:
        raise InvalidArgumentError(f"partition dump header lacks {exc}") from None
    if not np.allclose(alphas, grid.nodes, atol=1e-9):
        raise InvalidArgumentError("dumped alpha column does not match the header grid")
    return PartitionTable(grid, np.array(values), tau, quad_nodes)
