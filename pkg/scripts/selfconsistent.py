"""
Self-consistent Stieltjes-transform systems for elliptical sample covariance
matrices, the reduced functions F_p / F_{p,c}, and spectral densities.

Both the conditional system (sampled xi^2) and the limiting system (law of
xi^2) are evaluated through one QuadratureRule: point masses with weights
1/n for a realization, Gauss-Jacobi nodes for the beta family. With
g(x) = phi^-1 * sum_k w_k s_k / (1 + s_k x), the systems read

    m2 = -g(m1) / z,   m1 = p^-1 sum_i sigma_i / (-z (1 + sigma_i m2)),
    m  = p^-1 sum_i 1 / (-z (1 + sigma_i m2)),

and F(x, y) = p^-1 sum_i sigma_i / (-y + sigma_i g(x)) - x.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.special import betaln, roots_jacobi

from spectral_model import ModelConfig, RadialLaw, point_mass_law, radial_moment
from utils.run_utils import (
    DomainError, PoleError, SolverError, save_frame_to_csv
)

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000
DEFAULT_NODES = 256
DEFAULT_OMEGA = 0.5
LADDER_RATIO = 0.5
NEWTON_MAX_ITER = 60
DENSITY_ETA_FACTORS = (1e-2, 1e-3, 1e-4)

VARIANTS = ("m", "m1", "m2")
MODES = ("empirical", "limiting")

RealizationLike = Union[None, str, Sequence[float], np.ndarray, RadialLaw]


@dataclass(frozen=True)
class QuadratureRule:
    """
    Nodes/weights for integrals against dF(s).

    With weight_exponent k the rule integrates h(s) (l - s)^-k dF(s), i.e. the
    factor (l - s)^-k is absorbed into the weights.
    """
    nodes: np.ndarray
    weights: np.ndarray
    weight_exponent: float = 0.0

    def integrate(self, values: np.ndarray) -> complex:
        return np.sum(self.weights * values)


@dataclass(frozen=True)
class StieltjesTriple:
    z: complex
    m1: complex
    m2: complex
    m: complex
    residual: float
    iterations: int

    def variant(self, name: str) -> complex:
        if name not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}.")
        return getattr(self, name)


@dataclass
class DensityCurve:
    grid: np.ndarray
    values: np.ndarray
    eta_sequence: Tuple[float, ...]
    error_estimate: np.ndarray
    eta_scale: np.ndarray
    variant: str = "m"
    mode: str = "limiting"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "E": self.grid,
            "rho": self.values,
            "eta_error_estimate": self.error_estimate,
        })


def quadrature_rule(law: RadialLaw, nodes: int = DEFAULT_NODES, endpoint_power: float = 0.0) -> QuadratureRule:
    """
    Build the rule for integrals against the law of xi^2.

    For the beta family the density of xi^2 is
    (l - s)^d s^(b-1) / (l^(d+b) B(d+1, b)) on (0, l), which is a Jacobi
    weight after s = l (1 + t) / 2. `endpoint_power` = k moves (l - s)^-k into
    the weight (Jacobi alpha = d - k), which requires d - k > -1.

    Args:
        law: Radial law (beta family or point masses)
        nodes: Number of Gauss-Jacobi nodes for the beta family
        endpoint_power: Power k of the absorbed (l - s)^-k factor

    Returns:
        QuadratureRule

    Raises:
        DomainError: If d - k <= -1
    """
    if not law.is_parametric:
        masses = law.mass_array
        weights = np.full(masses.size, 1.0 / masses.size)
        if endpoint_power:
            gaps = law.l - masses
            if np.any(gaps <= 0):
                raise DomainError("Point mass at l makes (l - s)^-k infinite.")
            weights = weights * gaps ** (-endpoint_power)
        return QuadratureRule(masses, weights, float(endpoint_power))

    if not (isinstance(nodes, int) and nodes > 0):
        raise ValueError("nodes must be a positive integer.")
    alpha = law.d - endpoint_power
    beta = law.b - 1.0
    if alpha <= -1:
        raise DomainError(
            f"Integrand (l-s)^-{endpoint_power:g} against density (l-s)^{law.d:g} "
            f"does not converge (requires d > {endpoint_power - 1:g})."
        )
    t, w = roots_jacobi(nodes, alpha, beta)
    s = 0.5 * law.l * (1.0 + t)
    # (l/2)^(alpha+beta+1) from the change of variables, over the normalisation
    log_factor = ((alpha + law.b) * math.log(0.5 * law.l)
                  - (law.d + law.b) * math.log(law.l)
                  - betaln(law.d + 1.0, law.b))
    return QuadratureRule(s, w * math.exp(log_factor), float(endpoint_power))


def resolve_law(config: ModelConfig, xi_squared: RealizationLike) -> Tuple[RadialLaw, str]:
    """
    Map the xi^2 argument of the public operations to a law and a mode name.

    None or "limiting" selects config.radial; an array is a realization and
    must have length n; a RadialLaw is used as given.
    """
    if xi_squared is None or (isinstance(xi_squared, str) and xi_squared == "limiting"):
        return config.radial, "limiting"
    if isinstance(xi_squared, RadialLaw):
        return xi_squared, ("limiting" if xi_squared.is_parametric else "empirical")
    if isinstance(xi_squared, str):
        raise ValueError("xi_squared must be a realization, a RadialLaw, None or 'limiting'.")
    arr = np.asarray(xi_squared, dtype=float).ravel()
    if arr.size != config.n:
        raise ValueError(f"Realization must have length n={config.n}, got {arr.size}.")
    return point_mass_law(arr, l=max(config.radial.l, float(arr.max())), d=config.radial.d), "empirical"


class SystemKernel:
    """
    Vectorised evaluation of g, F and its partial derivatives for one model.

    Equal population eigenvalues are merged into atoms with multiplicities,
    so identity-like spectra cost O(1) per evaluation in p.
    """

    def __init__(self, config: ModelConfig, law: RadialLaw, rule: Optional[QuadratureRule] = None,
                 nodes: int = DEFAULT_NODES):
        self.config = config
        self.law = law
        self.rule = rule if rule is not None else quadrature_rule(law, nodes)
        atoms, counts = np.unique(config.spectrum.array, return_counts=True)
        self.sigma_atoms = atoms[::-1]
        self.sigma_weights = counts[::-1] / float(config.p)
        self.sigma1 = float(self.sigma_atoms[0])
        self.phi_inv = config.phi_inv
        mean_xi = float(self.rule.integrate(self.rule.nodes).real) if self.rule.weight_exponent == 0 \
            else radial_moment(law, 1.0)
        self.mean_xi = mean_xi
        # crude operator-norm scale of the spectrum
        self.scale = self.sigma1 * mean_xi * (1.0 + self.phi_inv) + law.l

    # -- g and its derivatives -------------------------------------------------
    def _node_denominators(self, x):
        den = 1.0 + self.rule.nodes * x
        zero = np.flatnonzero(den == 0)
        if zero.size:
            raise PoleError(f"1 + s x vanishes at quadrature node {zero[0]}", int(zero[0]), "node")
        return den

    def g(self, x):
        s = self.rule.nodes
        den = self._node_denominators(x)
        return self.phi_inv * np.sum(self.rule.weights * s / den)

    def g_derivatives(self, x):
        s = self.rule.nodes
        w = self.rule.weights
        den = self._node_denominators(x)
        q = s / den
        g0 = self.phi_inv * np.sum(w * q)
        g1 = -self.phi_inv * np.sum(w * q * q)
        g2 = 2.0 * self.phi_inv * np.sum(w * q * q * q)
        return g0, g1, g2

    # -- F and partials --------------------------------------------------------
    def _sigma_denominators(self, g, y):
        den = -y + self.sigma_atoms * g
        zero = np.flatnonzero(den == 0)
        if zero.size:
            raise PoleError(f"-y + sigma_i g(x) vanishes for sigma atom {zero[0]}", int(zero[0]), "sigma")
        return den

    def F(self, x, y):
        g = self.g(x)
        den = self._sigma_denominators(g, y)
        return np.sum(self.sigma_weights * self.sigma_atoms / den) - x

    def partials(self, x, y):
        """Return (F, dF/dx, dF/dy, d2F/dx2) at (x, y)."""
        g0, g1, g2 = self.g_derivatives(x)
        den = self._sigma_denominators(g0, y)
        sw = self.sigma_weights
        s = self.sigma_atoms
        F = np.sum(sw * s / den) - x
        Fy = np.sum(sw * s / den ** 2)
        Fx = -np.sum(sw * s ** 2 * g1 / den ** 2) - 1.0
        Fxx = np.sum(sw * (2.0 * s ** 3 * g1 ** 2 / den ** 3 - s ** 2 * g2 / den ** 2))
        return F, Fx, Fy, Fxx

    # -- the three displayed maps ----------------------------------------------
    def map_m2(self, m1, z):
        return -self.g(m1) / z

    def map_m1(self, m2, z):
        return np.sum(self.sigma_weights * self.sigma_atoms / (-z * (1.0 + self.sigma_atoms * m2)))

    def map_m(self, m2, z):
        return np.sum(self.sigma_weights / (-z * (1.0 + self.sigma_atoms * m2)))

    def residual(self, m1, m2, m, z) -> float:
        defects = (
            abs(m1 - self.map_m1(m2, z)) / max(1.0, abs(m1)),
            abs(m2 - self.map_m2(m1, z)) / max(1.0, abs(m2)),
            abs(m - self.map_m(m2, z)) / max(1.0, abs(m)),
        )
        return float(max(defects))

    def triple(self, m1, z, iterations: int) -> StieltjesTriple:
        m2 = self.map_m2(m1, z)
        m = self.map_m(m2, z)
        return StieltjesTriple(complex(z), complex(m1), complex(m2), complex(m),
                               self.residual(m1, m2, m, z), iterations)

    # -- solvers ---------------------------------------------------------------
    def fixed_point(self, z: complex, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                    omega: float = DEFAULT_OMEGA, m1: complex = 1j, m2: complex = 1j) -> StieltjesTriple:
        """
        Damped alternation of the two maps; omega halves after the residual
        increases twice in a row.
        """
        previous = math.inf
        increases = 0
        for iteration in range(1, max_iter + 1):
            m2 = (1.0 - omega) * m2 + omega * self.map_m2(m1, z)
            m1 = (1.0 - omega) * m1 + omega * self.map_m1(m2, z)
            res = max(abs(m1 - self.map_m1(m2, z)) / max(1.0, abs(m1)),
                      abs(m2 - self.map_m2(m1, z)) / max(1.0, abs(m2)))
            if res <= tol:
                triple = self.triple(m1, z, iteration)
                if triple.residual <= tol:
                    return triple
            if res > previous:
                increases += 1
                if increases >= 2:
                    omega *= 0.5
                    increases = 0
                    logging.debug(f"Damping reduced to {omega:g} at z={z}")
            else:
                increases = 0
            previous = res
        raise SolverError(f"Fixed-point iteration did not converge at z={z}", residual=previous,
                          z=z, iterations=max_iter)

    def newton(self, z: complex, m1: complex, tol: float = DEFAULT_TOL,
               max_iter: int = NEWTON_MAX_ITER) -> StieltjesTriple:
        """Newton iteration on F(x, z) = 0 from a warm start x = m1."""
        x = complex(m1)
        for iteration in range(1, max_iter + 1):
            F, Fx, _, _ = self.partials(x, z)
            if Fx == 0 or not np.isfinite(F):
                break
            if abs(F) <= 0.1 * tol * max(1.0, abs(x)):
                triple = self.triple(x, z, iteration)
                if triple.residual <= tol and _in_upper_half(triple):
                    return triple
            step = F / Fx
            x = x - step
            if abs(step) <= 1e-15 * max(1.0, abs(x)):
                triple = self.triple(x, z, iteration)
                if triple.residual <= tol and _in_upper_half(triple):
                    return triple
                break
        triple = self.triple(x, z, max_iter)
        if triple.residual <= tol and _in_upper_half(triple):
            return triple
        raise SolverError(f"Newton continuation failed at z={z}", residual=triple.residual,
                          z=z, iterations=max_iter)

    def ladder(self, energy: float, etas: Sequence[float], tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> List[StieltjesTriple]:
        """
        Solve along a vertical line E + i*eta for decreasing etas.

        The chain starts with the damped fixed point at eta_top (from
        m1 = m2 = i) and continues with warm-started Newton steps, shrinking
        eta geometrically; a failed step is retried with a smaller eta
        decrement.

        Returns:
            Triples at each requested eta, in the given order
        """
        etas = [float(e) for e in etas]
        if any(e <= 0 for e in etas):
            raise DomainError("Spectral parameter must satisfy Im z > 0.")
        if any(etas[i] < etas[i + 1] for i in range(len(etas) - 1)):
            raise ValueError("etas must be nonincreasing.")
        eta_top = max(etas[0], 10.0 * self.scale)
        current = self.fixed_point(complex(energy, eta_top), tol=tol, max_iter=max_iter)
        total = current.iterations
        results = []
        eta = eta_top
        factor = LADDER_RATIO
        for target in etas:
            while eta > target:
                trial_eta = max(target, eta * factor)
                try:
                    nxt = self.newton(complex(energy, trial_eta), current.m1, tol=tol)
                except SolverError as e:
                    factor = math.sqrt(factor)
                    if factor > 1.0 - 1e-6:
                        raise SolverError(f"Continuation stalled at E={energy}, eta={eta:g}",
                                          residual=e.residual, z=complex(energy, trial_eta),
                                          iterations=total)
                    continue
                total += nxt.iterations
                current = nxt
                eta = trial_eta
                factor = max(LADDER_RATIO, factor * factor)
            results.append(StieltjesTriple(current.z, current.m1, current.m2, current.m,
                                           current.residual, total))
        return results

    def solve(self, z: complex, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              initial: Optional[complex] = None) -> StieltjesTriple:
        z = complex(z)
        if z.imag <= 0:
            raise DomainError(f"Spectral parameter must satisfy Im z > 0, got {z}.")
        if initial is not None:
            try:
                return self.newton(z, initial, tol=tol)
            except SolverError:
                logging.debug(f"Warm start failed at z={z}; running the eta ladder")
        if z.imag >= 10.0 * self.scale:
            return self.fixed_point(z, tol=tol, max_iter=max_iter)
        return self.ladder(z.real, [z.imag], tol=tol, max_iter=max_iter)[0]


def _in_upper_half(triple: StieltjesTriple) -> bool:
    return triple.m1.imag > 0 and triple.m2.imag > 0 and triple.m.imag > 0


def system_kernel(config: ModelConfig, xi_squared: RealizationLike = None,
                  nodes: int = DEFAULT_NODES) -> SystemKernel:
    law, _ = resolve_law(config, xi_squared)
    return SystemKernel(config, law, nodes=nodes)


def solve_system(config: ModelConfig, xi_squared: RealizationLike, z: complex,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 initial: Optional[complex] = None) -> StieltjesTriple:
    """
    Solve the conditional (realization) or limiting system at z in C+.

    Args:
        config: Model configuration
        xi_squared: Realization of length n, a RadialLaw, or None/"limiting"
        z: Spectral parameter with Im z > 0
        tol: Residual tolerance
        max_iter: Iteration cap of the damped fixed point
        initial: Optional warm start for m1

    Returns:
        StieltjesTriple with residual <= tol

    Raises:
        DomainError: If Im z <= 0
        SolverError: If the scheme does not converge
    """
    return system_kernel(config, xi_squared).solve(z, tol=tol, max_iter=max_iter, initial=initial)


def reflect(triple: StieltjesTriple) -> StieltjesTriple:
    """The solution at conj(z): every transform is conjugated."""
    return StieltjesTriple(triple.z.conjugate(), triple.m1.conjugate(), triple.m2.conjugate(),
                           triple.m.conjugate(), triple.residual, triple.iterations)


def eval_Fp(config: ModelConfig, xi_squared: Sequence[float], x: complex, z: complex) -> complex:
    """F_p(x, z) for a realization xi_1^2, ..., xi_n^2."""
    arr = np.asarray(xi_squared, dtype=float).ravel()
    if arr.size != config.n:
        raise ValueError(f"Realization must have length n={config.n}, got {arr.size}.")
    return complex(system_kernel(config, arr).F(x, z))


def eval_Fpc(config: ModelConfig, law: RadialLaw, x, y):
    """F_{p,c}(x, y); real inputs give a real result."""
    value = SystemKernel(config, law).F(x, y)
    if np.isrealobj(np.asarray(x)) and np.isrealobj(np.asarray(y)):
        return float(np.real(value))
    return complex(value)


def partials_Fpc(config: ModelConfig, law: RadialLaw, x: float, y: float) -> Tuple[float, float, float]:
    """Return (dF/dx, dF/dy, d2F/dx2) of F_{p,c} at real (x, y)."""
    _, Fx, Fy, Fxx = SystemKernel(config, law).partials(float(x), float(y))
    return float(Fx), float(Fy), float(Fxx)


def _richardson(etas: Sequence[float], values: Sequence[float]) -> Tuple[float, float]:
    """
    Extrapolate f(eta) = f0 + c*eta to eta = 0 from the two smallest etas;
    the pair with the largest eta gives a second estimate for the error.
    """
    (e1, e2, e3), (f1, f2, f3) = etas, values
    fine = f3 - e3 * (f2 - f3) / (e2 - e3)
    coarse = f2 - e2 * (f1 - f2) / (e1 - e2)
    return fine, abs(fine - coarse)


def density(config: ModelConfig, mode: str, variant: str, grid: Sequence[float],
            xi_squared: RealizationLike = None, eta_scale: Optional[Sequence[float]] = None,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> DensityCurve:
    """
    Spectral density by Stieltjes inversion, rho(E) = lim Im m(E + i eta) / pi.

    Each grid point runs one eta-ladder through eta = f * h(E) for
    f in (1e-2, 1e-3, 1e-4) and Richardson-extrapolates to eta = 0.

    Args:
        config: Model configuration
        mode: "empirical" (needs xi_squared) or "limiting"
        variant: "m", "m1" or "m2"
        grid: Energies E > 0
        xi_squared: Realization for empirical mode
        eta_scale: Per-point h(E); default 1e-2 * min(spectral scale, |E|)
        tol: Solver tolerance

    Returns:
        DensityCurve with values clamped at 0

    Raises:
        SolverError: With the failing grid point in the message
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}.")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}.")
    if mode == "empirical" and xi_squared is None:
        raise ValueError("empirical mode needs a realization.")
    kernel = system_kernel(config, xi_squared if mode == "empirical" else None)
    energies = np.asarray(grid, dtype=float)
    if eta_scale is None:
        scales = 1e-2 * np.minimum(kernel.scale, np.maximum(np.abs(energies), 1e-12))
    else:
        scales = np.broadcast_to(np.asarray(eta_scale, dtype=float), energies.shape).copy()

    values = np.empty_like(energies)
    errors = np.empty_like(energies)
    for i, (energy, h) in enumerate(zip(energies, scales)):
        etas = [f * h for f in DENSITY_ETA_FACTORS]
        try:
            triples = kernel.ladder(energy, etas, tol=tol, max_iter=max_iter)
        except SolverError as e:
            logging.error(f"Density solve failed at E={energy:g}: {e}")
            raise SolverError(f"Density solve failed at grid point E={energy:g}: {e}",
                              residual=e.residual, z=e.z, iterations=e.iterations)
        ims = [t.variant(variant).imag / math.pi for t in triples]
        rho, err = _richardson(etas, ims)
        values[i] = max(rho, 0.0)
        errors[i] = err
    logging.info(f"Density ({mode}, {variant}) evaluated on {energies.size} points")
    return DensityCurve(energies, values, DENSITY_ETA_FACTORS, errors, scales, variant, mode)


def density_mass(curve: DensityCurve) -> float:
    return float(trapezoid(curve.values, curve.grid))


def save_density(curve: DensityCurve, output_path: str) -> pd.DataFrame:
    return save_frame_to_csv(curve.to_frame(), output_path)
