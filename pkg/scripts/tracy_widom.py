"""
Tracy-Widom (beta = 1) distribution via the Hastings-McLeod solution of
Painleve II, q'' = s q + 2 q^3, q(s) ~ Ai(s) as s -> +inf.

    F2(s) = exp(-int_s^inf (x - s) q(x)^2 dx)
    F1(s) = sqrt(F2(s)) * exp(-1/2 int_s^inf q(x) dx)
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.integrate import solve_ivp, trapezoid
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import airy, itairy

from utils.run_utils import (
    ComputationError, DomainError, check_finite, load_frame_from_csv, save_frame_to_csv
)

DEFAULT_S_MIN = -10.0
DEFAULT_S_MAX = 6.0
DEFAULT_STEP = 1e-3

# Start of the backward integration; Ai data are exact there to double precision.
START_POINT = 10.0
# Below this point the left asymptotic series replaces the integration.
JOIN_POINT = -8.5
RTOL = 1e-13
ATOL = 1e-30
BLOWUP_LEVEL = 1e3


class IntegrationError(ComputationError):
    """Exception for a Painleve II integration that left the Hastings-McLeod branch."""

    def __init__(self, message: str, location: float):
        super().__init__(message)
        self.location = location


@dataclass
class TW1Table:
    s_grid: np.ndarray
    q_values: np.ndarray
    F1_values: np.ndarray
    splice_mismatch: float = float("nan")
    s_join: float = float("nan")
    spline: CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        self.s_grid = np.asarray(self.s_grid, dtype=float)
        self.q_values = np.asarray(self.q_values, dtype=float)
        self.F1_values = np.asarray(self.F1_values, dtype=float)
        self.spline = CubicSpline(self.s_grid, self.F1_values, bc_type="natural")

    @property
    def s_min(self) -> float:
        return float(self.s_grid[0])

    @property
    def s_max(self) -> float:
        return float(self.s_grid[-1])

    @property
    def step(self) -> float:
        return float(self.s_grid[1] - self.s_grid[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"s": self.s_grid, "q": self.q_values, "F1": self.F1_values})


def left_asymptotic_q(s: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Hastings-McLeod solution for s -> -inf."""
    s = np.asarray(s, dtype=float)
    s3 = s ** 3
    return np.sqrt(-s / 2.0) * (1.0 + 1.0 / (8.0 * s3) - 73.0 / (128.0 * s3 ** 2)
                                + 10657.0 / (1024.0 * s3 ** 3))


def airy_tail_integrals(a: float):
    """
    Integrals of the Airy tail beyond a.

    Returns:
        (int_a^inf Ai, int_a^inf Ai^2, int_a^inf (x - a) Ai^2)
    """
    ai, aip, _, _ = airy(a)
    w = 1.0 / 3.0 - itairy(a)[0]
    u = aip ** 2 - a * ai ** 2
    v = (2.0 * a ** 2 * ai ** 2 - 2.0 * a * aip ** 2 - ai * aip) / 3.0
    return float(w), float(u), float(v)


def _painleve_rhs(s, y):
    q, qp, _, u, _ = y
    return [qp, s * q + 2.0 * q ** 3, -q, -q * q, -u]


def _blowup(s, y):
    return abs(y[0]) - BLOWUP_LEVEL


_blowup.terminal = True


def _wrong_sign(s, y):
    return y[0]


_wrong_sign.terminal = True
_wrong_sign.direction = -1


def build_table(s_min: float = DEFAULT_S_MIN, s_max: float = DEFAULT_S_MAX,
                step: float = DEFAULT_STEP) -> TW1Table:
    """
    Build the F1 table on a uniform grid.

    The state (q, q', int q, int q^2, int (x - s) q^2) is integrated backward
    from max(s_max, 10) with DOP853, with Airy initial data and the tails
    closed analytically. Below max(s_min, -8.5) q follows the left asymptotic
    series and only the three integrals are integrated further.

    Args:
        s_min: Left end of the grid, below -8
        s_max: Right end of the grid, above 5
        step: Grid step

    Returns:
        TW1Table

    Raises:
        IntegrationError: If q leaves the Hastings-McLeod branch
    """
    if not s_min < -8:
        raise ValueError("s_min must be below -8.")
    if not s_max > 5:
        raise ValueError("s_max must be above 5.")
    if not step > 0:
        raise ValueError("step must be positive.")

    count = int(round((s_max - s_min) / step)) + 1
    grid = s_min + step * np.arange(count)
    s_start = max(s_max, START_POINT)
    s_join = max(s_min, JOIN_POINT)

    ai, aip, _, _ = airy(s_start)
    w0, u0, v0 = airy_tail_integrals(s_start)
    upper = grid[grid >= s_join][::-1]
    sol = solve_ivp(_painleve_rhs, (s_start, s_join), [ai, aip, w0, u0, v0], method="DOP853",
                    rtol=RTOL, atol=ATOL, dense_output=True, events=(_blowup, _wrong_sign))
    if sol.status == 1:
        hit = [ev for ev in sol.t_events if len(ev)]
        location = float(hit[0][0]) if hit else float(sol.t[-1])
        logging.error(f"Painleve II integration left the Hastings-McLeod branch at s={location:g}")
        raise IntegrationError(f"q blew up or changed sign at s={location:g}", location)
    if not sol.success:
        raise IntegrationError(f"Painleve II integration failed: {sol.message}", float(sol.t[-1]))

    upper_states = sol.sol(upper)
    q = np.empty(count)
    w = np.empty(count)
    v = np.empty(count)
    n_upper = upper.size
    q[count - n_upper:] = upper_states[0][::-1]
    w[count - n_upper:] = upper_states[2][::-1]
    v[count - n_upper:] = upper_states[4][::-1]

    join_state = sol.sol(s_join)
    mismatch = abs(float(join_state[0]) - float(left_asymptotic_q(s_join)))
    if mismatch > 1e-8:
        logging.warning(f"Left splice mismatch at s={s_join:g}: {mismatch:.3e}")

    lower = grid[grid < s_join][::-1]
    if lower.size:
        def rhs(s, y):
            qa = float(left_asymptotic_q(s))
            return [-qa, -qa * qa, -y[1]]

        tail = solve_ivp(rhs, (s_join, float(lower[-1])), [join_state[2], join_state[3], join_state[4]],
                         method="DOP853", rtol=RTOL, atol=ATOL, t_eval=lower)
        if not tail.success:
            raise IntegrationError(f"Left tail integration failed: {tail.message}", s_join)
        n_lower = lower.size
        q[:n_lower] = left_asymptotic_q(lower[::-1])
        w[:n_lower] = tail.y[0][::-1]
        v[:n_lower] = tail.y[2][::-1]

    F1 = np.exp(-0.5 * v - 0.5 * w)
    F1 = np.clip(F1, 0.0, 1.0)
    logging.info(f"TW1 table built on [{s_min:g}, {s_max:g}] with {count} points")
    return TW1Table(grid, q, F1, splice_mismatch=mismatch, s_join=s_join)


def cdf(table: TW1Table, s):
    """F1(s) by cubic interpolation; 0 left of the table and 1 right of it."""
    s_arr = np.asarray(s, dtype=float)
    values = np.clip(table.spline(s_arr), 0.0, 1.0)
    values = np.where(s_arr < table.s_min, 0.0, np.where(s_arr > table.s_max, 1.0, values))
    return float(values) if values.ndim == 0 else values


def quantile(table: TW1Table, u: float) -> float:
    """
    Inverse of cdf by bracketed root finding on the table range.

    Raises:
        DomainError: If u is not in (0, 1)
    """
    if not (0.0 < u < 1.0):
        raise DomainError(f"u must be in (0, 1), got {u}.")
    lo, hi = table.s_min, table.s_max
    if cdf(table, lo) >= u:
        return lo
    if cdf(table, hi) <= u:
        return hi
    return brentq(lambda s: cdf(table, s) - u, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps)


def pdf(table: TW1Table, s):
    s_arr = np.asarray(s, dtype=float)
    values = np.maximum(table.spline(s_arr, 1), 0.0)
    values = np.where((s_arr < table.s_min) | (s_arr > table.s_max), 0.0, values)
    return float(values) if values.ndim == 0 else values


def mean(table: TW1Table) -> float:
    """int s dF1(s), integrated by parts on the table grid."""
    s, F = table.s_grid, table.F1_values
    return float(s[-1] * F[-1] - s[0] * F[0] - trapezoid(F, s))


def variance(table: TW1Table) -> float:
    s, F = table.s_grid, table.F1_values
    second = s[-1] ** 2 * F[-1] - s[0] ** 2 * F[0] - trapezoid(2.0 * s * F, s)
    return float(second - mean(table) ** 2)


def painleve_residual(table: TW1Table, lo: float = -8.0, hi: float = 4.0) -> float:
    """Max of |q'' - s q - 2 q^3| by central differences on [lo, hi]."""
    s, q, h = table.s_grid, table.q_values, table.step
    second = (q[2:] - 2.0 * q[1:-1] + q[:-2]) / h ** 2
    inner = s[1:-1]
    residual = np.abs(second - inner * q[1:-1] - 2.0 * q[1:-1] ** 3)
    mask = (inner >= lo) & (inner <= hi)
    return float(residual[mask].max())


def ks_distance(samples: Sequence[float], table: TW1Table) -> float:
    """Kolmogorov-Smirnov distance between the samples and F1."""
    samples = check_finite(samples, "samples")
    if samples.size == 0:
        raise ValueError("samples must be non-empty.")
    return float(stats.kstest(samples, lambda x: cdf(table, x)).statistic)


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> float:
    return float(stats.ks_2samp(np.asarray(a, dtype=float), np.asarray(b, dtype=float)).statistic)


def goe_edge_statistics(n: int, trials: int, rng: np.random.Generator,
                        method: str = "tridiagonal") -> np.ndarray:
    """
    Samples of n^(2/3) (mu_1 - 2) for GOE matrices with off-diagonal
    variance 1, where mu_1 = lambda_max / sqrt(n).

    The tridiagonal model (diagonal N(0, 2), off-diagonal chi_{n-k}) has the
    same eigenvalue law as the dense matrix.
    """
    if method not in ("tridiagonal", "dense"):
        raise ValueError("method must be 'tridiagonal' or 'dense'.")
    out = np.empty(trials)
    for t in range(trials):
        if method == "tridiagonal":
            diag = rng.normal(0.0, math.sqrt(2.0), n)
            off = np.sqrt(rng.chisquare(np.arange(n - 1, 0, -1)))
            top = linalg.eigvalsh_tridiagonal(diag, off, select="i", select_range=(n - 1, n - 1))[0]
        else:
            g = rng.standard_normal((n, n))
            a = (g + g.T) / math.sqrt(2.0)
            top = linalg.eigh(a, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0]
        out[t] = n ** (2.0 / 3.0) * (top / math.sqrt(n) - 2.0)
    return out


def save_table(table: TW1Table, output_path: str) -> pd.DataFrame:
    return save_frame_to_csv(table.to_frame(), output_path)


def load_table(path: str) -> TW1Table:
    df = load_frame_from_csv(path)
    missing = {"s", "q", "F1"} - set(df.columns)
    if missing:
        raise ValueError(f"TW1 table file is missing columns: {sorted(missing)}")
    return TW1Table(df["s"].to_numpy(), df["q"].to_numpy(), df["F1"].to_numpy())
