"""Mixed-autonomy Aw-Rascle-Zhang model and its linearization.

Everything in here works in SI units (m, s, veh/m). The helpers ``KMH`` and
``PER_KM`` convert traffic units at the boundary of the library.

State ordering for the physical deviation vector is
``z = (rho_h, v_h, rho_a, v_a)``. The Riemann coordinates ``w`` are ordered
so that ``w[:3]`` travel downstream and ``w[3]`` travels upstream whenever
the equilibrium is congested.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np
from scipy import optimize

from .exceptions import (
    CalibrationError,
    DomainError,
    InfeasibleEquilibriumError,
    ModelError,
)

KMH = 1.0 / 3.6
PER_KM = 1.0e-3

CLASSES = ("h", "a")


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the two-class road (SI units)."""

    free_flow_speed_h: float = 80.0 * KMH
    free_flow_speed_a: float = 60.0 * KMH
    gamma_h: float = 2.5
    gamma_a: float = 2.0
    tau_h: float = 30.0
    tau_a: float = 60.0
    spacing_h: float = 8.0
    spacing_a: float = 15.0
    vehicle_width: float = 2.07
    road_width: float = 6.5
    road_length: float = 1000.0
    ao_max_h: float = 0.9
    ao_max_a: float = 0.85

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value <= 0.0:
                raise DomainError(f"{f.name} must be strictly positive, got {value!r}")
        for name in ("ao_max_h", "ao_max_a"):
            if getattr(self, name) > 1.0:
                raise DomainError(f"{name} must lie in (0, 1]")

    def free_flow_speed(self, cls):
        return self.free_flow_speed_h if _check_class(cls) == "h" else self.free_flow_speed_a

    def ao_max(self, cls):
        return self.ao_max_h if _check_class(cls) == "h" else self.ao_max_a

    def gamma(self, cls):
        return self.gamma_h if _check_class(cls) == "h" else self.gamma_a

    def tau(self, cls):
        return self.tau_h if _check_class(cls) == "h" else self.tau_a

    @property
    def impact_area_h(self):
        return self.vehicle_width * self.spacing_h

    @property
    def impact_area_a(self):
        return self.vehicle_width * self.spacing_a

    def with_updates(self, **changes):
        return replace(self, **changes)


def paper_params(**overrides) -> ModelParams:
    """Road and driver parameters of the baseline experiment."""
    return ModelParams(**overrides)


def _check_class(cls):
    if cls not in CLASSES:
        raise DomainError(f"vehicle class must be 'h' or 'a', got {cls!r}")
    return cls


def area_occupancy(rho_h, rho_a, params: ModelParams):
    """Fraction of road surface covered by vehicle impact areas."""
    rho_h = np.asarray(rho_h, dtype=float)
    rho_a = np.asarray(rho_a, dtype=float)
    if np.any(rho_h < 0) or np.any(rho_a < 0):
        raise DomainError("densities must be nonnegative")
    ao = (params.impact_area_h * rho_h + params.impact_area_a * rho_a) / params.road_width
    return float(ao) if ao.ndim == 0 else ao


def _speed_unchecked(ao, cls, params):
    # Analytic continuation past jam occupancy; used by root finders only.
    ratio = np.maximum(ao, 0.0) / params.ao_max(cls)
    return params.free_flow_speed(cls) * (1.0 - ratio ** params.gamma(cls))


def equilibrium_speed(ao, cls, params: ModelParams):
    """Occupancy-based fundamental diagram ``V_e,cls(AO)``."""
    _check_class(cls)
    ao_arr = np.asarray(ao, dtype=float)
    if np.any(ao_arr < 0):
        raise DomainError("area occupancy must be nonnegative")
    if np.any(ao_arr > params.ao_max(cls)):
        raise DomainError(f"area occupancy exceeds jam occupancy of class {cls!r}")
    v = _speed_unchecked(ao_arr, cls, params)
    return float(v) if v.ndim == 0 else v


def equilibrium_speed_slope(ao, cls, params: ModelParams):
    """Derivative ``dV_e,cls/dAO``."""
    g = params.gamma(cls)
    amax = params.ao_max(cls)
    return -params.free_flow_speed(cls) * g * (ao / amax) ** (g - 1.0) / amax


@dataclass(frozen=True)
class Equilibrium:
    rho_h_star: float
    rho_a_star: float
    v_h_star: float
    v_a_star: float
    q_h_star: float
    q_a_star: float
    ao_star: float

    @property
    def total_flow(self):
        return self.q_h_star + self.q_a_star

    @property
    def penetration(self):
        return self.rho_a_star / (self.rho_h_star + self.rho_a_star)

    def as_vector(self):
        return np.array([self.rho_h_star, self.v_h_star, self.rho_a_star, self.v_a_star])


# |v_i* - V_e,i(AO*)| allowed when speeds are supplied rather than computed.
SPEED_CONSISTENCY_FRACTION = 0.02


def compute_equilibrium(rho_h_star, rho_a_star, params: ModelParams, v_h_star=None, v_a_star=None):
    """Equilibrium record for the given densities.

    Speeds default to the fundamental diagram values. Reference speeds can be
    passed instead; they are accepted when within 2% of the free-flow speed of
    the diagram value.
    """
    if not (rho_h_star > 0 and rho_a_star > 0):
        raise InfeasibleEquilibriumError(
            "both classes need a positive equilibrium density "
            f"(got rho_h={rho_h_star}, rho_a={rho_a_star})"
        )
    ao = area_occupancy(rho_h_star, rho_a_star, params)
    if ao >= min(params.ao_max_h, params.ao_max_a):
        raise InfeasibleEquilibriumError(f"area occupancy {ao:.4f} reaches jam occupancy")
    ve_h = equilibrium_speed(ao, "h", params)
    ve_a = equilibrium_speed(ao, "a", params)
    v_h = ve_h if v_h_star is None else float(v_h_star)
    v_a = ve_a if v_a_star is None else float(v_a_star)
    for cls, v, ve in (("h", v_h, ve_h), ("a", v_a, ve_a)):
        if abs(v - ve) > SPEED_CONSISTENCY_FRACTION * params.free_flow_speed(cls):
            raise InfeasibleEquilibriumError(
                f"speed of class {cls!r} ({v:.3f} m/s) is inconsistent with the "
                f"fundamental diagram ({ve:.3f} m/s)"
            )
    return Equilibrium(
        rho_h_star=float(rho_h_star),
        rho_a_star=float(rho_a_star),
        v_h_star=v_h,
        v_a_star=v_a,
        q_h_star=float(rho_h_star) * v_h,
        q_a_star=float(rho_a_star) * v_a,
        ao_star=ao,
    )


def calibrate_vehicle_width(target_v_h_star, rho_h_star, rho_a_star, params: ModelParams,
                            d_max=10.0, tol=1e-9):
    """Vehicle width that makes ``V_e,h(AO(rho*))`` hit ``target_v_h_star``."""
    if not (0.0 < target_v_h_star):
        raise DomainError("target speed must be positive")
    if rho_h_star <= 0 or rho_a_star <= 0:
        raise DomainError("densities must be positive")

    def mismatch(d):
        ao = d * (params.spacing_h * rho_h_star + params.spacing_a * rho_a_star) / params.road_width
        return _speed_unchecked(ao, "h", params) - target_v_h_star

    lo, hi = 1e-12, d_max
    f_lo, f_hi = mismatch(lo), mismatch(hi)
    if f_lo * f_hi > 0 or f_lo == 0.0:
        raise CalibrationError(
            f"no vehicle width in (0, {d_max}] m reproduces {target_v_h_star:.4f} m/s"
        )
    # The map d -> speed is monotone with slope ~ V_h / d_max, so xtol bounds the speed error.
    xtol = tol * d_max / (10.0 * params.free_flow_speed_h)
    d = optimize.bisect(mismatch, lo, hi, xtol=xtol, maxiter=400)
    if abs(mismatch(d)) > tol:
        raise CalibrationError("bisection did not reach the requested tolerance")
    return d


def _congested_root(flow_minus_target, ao_of_scale, scale_at_jam, params, what):
    """Root of ``flow_minus_target(s)`` on the falling branch of the flow curve."""
    grid = np.linspace(0.0, scale_at_jam, 2001)[1:-1]
    vals = np.array([flow_minus_target(s) for s in grid])
    k_peak = int(np.argmax(vals))
    if vals[k_peak] < 0:
        raise InfeasibleEquilibriumError(f"{what} exceeds the capacity of the road")
    lo, hi = grid[k_peak], scale_at_jam * (1 - 1e-12)
    if flow_minus_target(hi) > 0:
        raise InfeasibleEquilibriumError(f"{what}: no congested equilibrium found")
    return optimize.brentq(flow_minus_target, lo, hi, xtol=1e-14, rtol=1e-13)


def equilibrium_at_penetration(penetration, total_flow, params: ModelParams) -> Equilibrium:
    """Congested equilibrium with ``rho_a / (rho_h + rho_a) = penetration`` carrying ``total_flow``."""
    p = float(penetration)
    if not 0.0 < p < 1.0:
        raise DomainError(f"penetration must lie in (0, 1), got {p}")
    if not total_flow > 0:
        raise DomainError("total flow must be positive")
    per_density = params.vehicle_width * ((1 - p) * params.spacing_h + p * params.spacing_a) / params.road_width
    jam = min(params.ao_max_h, params.ao_max_a) / per_density

    def excess(rho):
        ao = per_density * rho
        return rho * ((1 - p) * _speed_unchecked(ao, "h", params) + p * _speed_unchecked(ao, "a", params)) - total_flow

    rho = _congested_root(excess, None, jam, params, f"flow {total_flow:.4g} veh/s at penetration {p:.3f}")
    return compute_equilibrium((1 - p) * rho, p * rho, params)


def equilibrium_for_demand(q_h, q_a, params: ModelParams) -> Equilibrium:
    """Congested equilibrium carrying the class flows ``q_h`` and ``q_a`` (veh/s)."""
    if not (q_h > 0 and q_a > 0):
        raise DomainError("both class flows must be positive")
    ao_jam = min(params.ao_max_h, params.ao_max_a)
    d_w = params.vehicle_width / params.road_width

    def densities(ao):
        return q_h / _speed_unchecked(ao, "h", params), q_a / _speed_unchecked(ao, "a", params)

    def excess(ao):
        # positive while the flows fit at this occupancy on the congested side
        rh, ra = densities(ao)
        return ao - d_w * (params.spacing_h * rh + params.spacing_a * ra)

    grid = np.linspace(0.0, ao_jam, 4001)[1:-1]
    vals = np.array([excess(a) for a in grid])
    if not np.any(vals > 0):
        raise InfeasibleEquilibriumError(f"demand {q_h + q_a:.4g} veh/s exceeds the capacity of the road")
    k = int(np.nonzero(vals > 0)[0][-1])
    ao = optimize.brentq(excess, grid[k], grid[k + 1], xtol=1e-15)
    return compute_equilibrium(*densities(ao), params)


class RegimeTag(str, Enum):
    FREE = "free"
    CONGESTED = "congested"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class Regime:
    tag: RegimeTag
    lambda4: float


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """Linearized plant in Riemann coordinates on ``[0, L]``.

    ``transform_T`` maps the physical deviation vector to the diagonal
    (unscaled) characteristic variables; the exponential scaling that removes
    the diagonal source terms is applied on top of it by :meth:`to_riemann`.
    """

    lam: np.ndarray
    jacobian: np.ndarray
    source: np.ndarray
    jhat: np.ndarray
    transform_T: np.ndarray
    transform_T_inv: np.ndarray
    q_bc: np.ndarray
    r_bc: np.ndarray
    kappa: np.ndarray
    control_scale: float
    length: float
    nx: int
    equilibrium: Equilibrium
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def lambda_plus(self):
        return self.lam[:3]

    @property
    def lambda_minus(self):
        return -self.lam[3]

    @property
    def dx(self):
        return self.length / self.nx

    @property
    def x(self):
        return np.linspace(0.0, self.length, self.nx + 1)

    @property
    def max_speed(self):
        return float(np.max(np.abs(self.lam)))

    def _exponents(self):
        d = np.diag(self.jhat) / self.lam
        return d[None, :] - d[:, None]

    def coupling(self, x):
        """Full 4x4 coupling matrix ``Sigma(x)`` with zero diagonal, shape (..., 4, 4)."""
        x = np.asarray(x, dtype=float)
        sig = self.jhat * np.exp(self._exponents() * x[..., None, None])
        idx = np.arange(4)
        sig[..., idx, idx] = 0.0
        return sig

    def _sampled(self):
        if "sigma" not in self._cache:
            self._cache["sigma"] = self.coupling(self.x)
        return self._cache["sigma"]

    @property
    def sigma_pp(self):
        return self._sampled()[:, :3, :3]

    @property
    def sigma_pm(self):
        return self._sampled()[:, :3, 3]

    @property
    def sigma_mp(self):
        return self._sampled()[:, 3, :3]

    def scaling(self, x=None):
        """Per-coordinate factors ``exp(-Jhat_jj x / lambda_j)``, shape (4, nx+1)."""
        x = self.x if x is None else np.asarray(x, dtype=float)
        return np.exp(-(np.diag(self.jhat) / self.lam)[:, None] * x[None, :])

    def to_riemann(self, z):
        """Physical deviations ``z`` (4, nx+1) to Riemann coordinates ``w``."""
        z = np.asarray(z, dtype=float)
        return self.scaling() * (self.transform_T @ z)

    def to_deviation(self, w):
        """Riemann coordinates ``w`` (4, nx+1) to physical deviations ``z``."""
        w = np.asarray(w, dtype=float)
        return self.transform_T_inv @ (w / self.scaling())

    def resample(self, nx):
        """Same system sampled on a different number of cells."""
        if nx == self.nx:
            return self
        return replace(self, nx=int(nx), _cache={})

    def fingerprint(self):
        """Bytes that identify the sampled system, for cache keys."""
        parts = [self.lam, self.jhat, self.q_bc, self.r_bc, np.array([self.length, self.nx])]
        return b"".join(np.ascontiguousarray(p, dtype=float).tobytes() for p in parts)


def _jacobians(eq: Equilibrium, params: ModelParams):
    """Quasilinear flux and source matrices at the equilibrium."""
    rh, ra = eq.rho_h_star, eq.rho_a_star
    vh, va = eq.v_h_star, eq.v_a_star
    slope_h = equilibrium_speed_slope(eq.ao_star, "h", params)
    slope_a = equilibrium_speed_slope(eq.ao_star, "a", params)
    dao_h = params.impact_area_h / params.road_width
    dao_a = params.impact_area_a / params.road_width
    vh1, vh2 = slope_h * dao_h, slope_h * dao_a
    va1, va2 = slope_a * dao_h, slope_a * dao_a

    flux = np.array([
        [vh, rh, 0.0, 0.0],
        [0.0, vh + rh * vh1, vh2 * (va - vh), ra * vh2],
        [0.0, 0.0, va, ra],
        [va1 * (vh - va), rh * va1, 0.0, va + ra * va2],
    ])
    source = np.zeros((4, 4))
    source[1] = [vh1 / params.tau_h, -1.0 / params.tau_h, vh2 / params.tau_h, 0.0]
    source[3] = [va1 / params.tau_a, 0.0, va2 / params.tau_a, -1.0 / params.tau_a]
    return flux, source


def _order_eigenpairs(lam, vec):
    # lambda4 = slowest (most negative); the other three ascending.
    order = np.argsort(lam)
    order = np.concatenate([order[1:], order[:1]])
    lam, vec = lam[order], vec[:, order]
    for j in range(4):
        k = np.argmax(np.abs(vec[:, j]))
        if vec[k, j] < 0:
            vec[:, j] = -vec[:, j]
    return lam, vec


def ordering_holds(lam, atol=1e-12):
    l1, l2, l3, l4 = lam
    return l4 <= min(l1, l3) + atol and min(l1, l3) <= l2 + atol and l2 <= max(l1, l3) + atol


def linearize(eq: Equilibrium, params: ModelParams, nx: int = 100) -> LinearizedSystem:
    """Linearize around ``eq`` and bring the system into Riemann coordinates."""
    flux, source = _jacobians(eq, params)
    lam, vec = np.linalg.eig(flux)
    if np.max(np.abs(lam.imag)) > 1e-9 * max(1.0, np.max(np.abs(lam.real))):
        raise ModelError(f"complex characteristic speeds {lam}: hyperbolicity lost")
    lam, vec = _order_eigenpairs(lam.real, vec.real)
    if np.linalg.cond(vec) > 1e10:
        raise ModelError("eigenbasis of the flux Jacobian is (nearly) defective")
    if not ordering_holds(lam):
        raise ModelError(f"characteristic speeds {lam} violate the ordering condition")
    if np.any(np.abs(lam) < 1e-9):
        raise ModelError("a characteristic speed vanishes")
    vec_inv = np.linalg.inv(vec)
    jhat = vec_inv @ source @ vec

    # Inflow: rho_h(0) = rho_h*, rho_a(0) = rho_a*, total flow at equilibrium.
    flow_row = np.array([eq.v_h_star, eq.rho_h_star, eq.v_a_star, eq.rho_a_star])
    c0 = np.vstack([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], flow_row]) @ vec
    try:
        q_bc = -np.linalg.solve(c0[:, :3], c0[:, 3])
    except np.linalg.LinAlgError as exc:
        raise ModelError("inflow boundary conditions are degenerate") from exc

    kappa = flow_row @ vec
    length = params.road_length
    gain_L = kappa * np.exp(np.diag(jhat) / lam * length)
    if abs(gain_L[3]) < 1e-14:
        raise ModelError("the outflow boundary does not actuate the upstream characteristic")
    r_bc = -gain_L[:3] / gain_L[3]
    control_scale = 1.0 / gain_L[3]

    return LinearizedSystem(
        lam=lam,
        jacobian=flux,
        source=source,
        jhat=jhat,
        transform_T=vec_inv,
        transform_T_inv=vec,
        q_bc=q_bc,
        r_bc=r_bc,
        kappa=kappa,
        control_scale=float(control_scale),
        length=float(length),
        nx=int(nx),
        equilibrium=eq,
    )


def classify_regime(sys: LinearizedSystem) -> Regime:
    lam4 = float(sys.lam[3])
    tag = RegimeTag.CONGESTED if lam4 < 0 else RegimeTag.FREE
    return Regime(tag=tag, lambda4=lam4)


@dataclass(frozen=True)
class RegimeMap:
    rho_h: np.ndarray
    rho_a: np.ndarray
    lambda4: np.ndarray
    tags: np.ndarray

    def rows(self):
        """Flat ``(rho_h, rho_a, lambda4, tag)`` records, rho_h varying fastest."""
        for i in range(len(self.rho_a)):
            for j in range(len(self.rho_h)):
                yield self.rho_h[j], self.rho_a[i], self.lambda4[i, j], self.tags[i, j]


def regime_map(rho_h_grid, rho_a_grid, params: ModelParams) -> RegimeMap:
    """Classify every ``(rho_h, rho_a)`` pair; arrays are indexed ``[i_a, i_h]``."""
    rho_h_grid = np.asarray(rho_h_grid, dtype=float)
    rho_a_grid = np.asarray(rho_a_grid, dtype=float)
    lam4 = np.full((rho_a_grid.size, rho_h_grid.size), np.nan)
    tags = np.full(lam4.shape, RegimeTag.INFEASIBLE.value, dtype=object)
    for i, ra in enumerate(rho_a_grid):
        for j, rh in enumerate(rho_h_grid):
            try:
                sys = linearize(compute_equilibrium(rh, ra, params), params, nx=1)
            except (DomainError, ModelError):
                continue
            reg = classify_regime(sys)
            lam4[i, j] = reg.lambda4
            tags[i, j] = reg.tag.value
    return RegimeMap(rho_h=rho_h_grid, rho_a=rho_a_grid, lambda4=lam4, tags=tags)
