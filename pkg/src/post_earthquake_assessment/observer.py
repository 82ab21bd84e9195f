"""Nonlinear model-based observer and its linearised error analysis.

The observer is the building model with grounded viscous dampers E at the
measured floors, driven by the corrective forces c2' E y'(t)::

    M q^'' + (C + c2' E c2) q^' + f_R(q^, z^) = c2' E y'(t)

Error statistics come from the observer linearised at the initial stiffness
K0; they are a design-stage quantity reused for post-event uncertainty.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, linalg, optimize

from .errors import OptimizationError, SingularityError, UnitsError, ValidationError
from .records import VELOCITY, Record
from .structure import (
    BuildingModel,
    IntegratorSettings,
    ResponseHistory,
    assemble_matrices,
    drift_operator,
    integrate_newmark,
    resample,
)

logger = logging.getLogger(__name__)

Density = float | np.ndarray | Callable[[np.ndarray], np.ndarray]

TRACE_P = "trace_P"
TRACE_P_ISD = "trace_P_ISD"
OBJECTIVES = (TRACE_P, TRACE_P_ISD)

GAIN_UNITS = {"N*s/m": 1.0, "kN*s/m": 1e3}


@dataclass
class SensorLayout:
    """Measured stories, 1-based, in channel order."""

    measured_dofs: tuple[int, ...]

    def __post_init__(self) -> None:
        self.measured_dofs = tuple(int(k) for k in self.measured_dofs)
        if not self.measured_dofs:
            raise ValidationError("sensor layout needs at least one measured story")
        if len(set(self.measured_dofs)) != len(self.measured_dofs):
            raise ValidationError(f"duplicate stories in layout {self.measured_dofs}")

    @property
    def m(self) -> int:
        return len(self.measured_dofs)

    def validate(self, n: int) -> None:
        for k in self.measured_dofs:
            if not 1 <= k <= n:
                raise ValidationError(f"measured story {k} outside 1..{n}")

    def selection_matrix(self, n: int) -> np.ndarray:
        """Boolean map c2 (m x n) from floor DOFs to channels."""
        self.validate(n)
        c2 = np.zeros((self.m, n))
        c2[np.arange(self.m), np.array(self.measured_dofs) - 1] = 1.0
        return c2

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"measured_dofs": list(self.measured_dofs)}, indent=2) + "\n",
                        encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> SensorLayout:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(measured_dofs=tuple(data["measured_dofs"]))


@dataclass
class FeedbackGain:
    """Diagonal added-damper constants (N*s/m), one per channel."""

    E_diag: np.ndarray
    objective: float | None = None
    objective_kind: str | None = None
    iterations: int = 0
    converged: bool = True

    def __post_init__(self) -> None:
        self.E_diag = np.atleast_1d(np.asarray(self.E_diag, dtype=float))
        if not np.all(np.isfinite(self.E_diag)) or np.any(self.E_diag <= 0):
            raise ValidationError("feedback gains must be finite and strictly positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.E_diag)

    def to_dict(self) -> dict:
        return {
            "units": "N*s/m",
            "E_diag": self.E_diag.tolist(),
            "objective": self.objective,
            "objective_kind": self.objective_kind,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: dict) -> FeedbackGain:
        units = data.get("units")
        if units not in GAIN_UNITS:
            raise UnitsError(f"gain units must be one of {sorted(GAIN_UNITS)}, got {units!r}")
        return cls(
            E_diag=np.asarray(data["E_diag"], dtype=float) * GAIN_UNITS[units],
            objective=data.get("objective"),
            objective_kind=data.get("objective_kind"),
            iterations=data.get("iterations", 0),
            converged=data.get("converged", True),
        )

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> FeedbackGain:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ErrorCovariance:
    """Displacement-error covariance P (m^2) and story-drift variances (m^2)."""

    P: np.ndarray
    P_isd: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def trace(self) -> float:
        return float(np.trace(self.P))

    @property
    def trace_isd(self) -> float:
        return float(np.sum(self.P_isd))

    def isd_variance_ratio(self, heights: np.ndarray) -> np.ndarray:
        """Drift-ratio variances P_isd / h^2."""
        return self.P_isd / np.asarray(heights, dtype=float) ** 2

    def to_dict(self) -> dict:
        return {
            "units": "m^2",
            "P": self.P.tolist(),
            "P_isd": self.P_isd.tolist(),
            "metadata": self.metadata,
        }

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> ErrorCovariance:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("units", "m^2") != "m^2":
            raise UnitsError(f"covariance units must be 'm^2', got {data['units']!r}")
        return cls(P=np.asarray(data["P"]), P_isd=np.asarray(data["P_isd"]),
                   metadata=data.get("metadata", {}))


@dataclass
class ObserverSolution:
    q_hat: ResponseHistory
    covariance: ErrorCovariance | None
    gain: FeedbackGain
    layout: SensorLayout


@dataclass
class FrequencyGrid:
    """Uniform grid on [0, omega_max]; omega_max defaults to
    ``omega_factor`` times the largest closed-loop pole magnitude."""

    points: int = 2048
    omega_factor: float = 5.0
    omega_max: float | None = None
    refine_check: bool = True


@dataclass
class OptimizerConfig:
    """Simplex search over log(E)."""

    initial_range: tuple[float, float] = (1e2, 1e6)
    bounds: tuple[float, float] = (1e-2, 1e9)
    max_iter: int = 500
    tolerance: float = 1e-4


# ── Linear algebra helpers ────────────────────────────────────────


def isd_from_covariance(p: np.ndarray) -> np.ndarray:
    """P_isd(k) = P(k,k) + P(k-1,k-1) - 2 P(k,k-1), with P_isd(1) = P(1,1)."""
    t = drift_operator(p.shape[0])
    return np.diag(t @ p @ t.T).copy()


def observer_damping(model: BuildingModel, layout: SensorLayout, gain: FeedbackGain) -> np.ndarray:
    """C + c2' E c2."""
    _, c, _ = assemble_matrices(model)
    c2 = layout.selection_matrix(model.n)
    return c + c2.T @ gain.matrix @ c2


def default_b2(model: BuildingModel) -> np.ndarray:
    """Process noise enters as base excitation: b2 = -M b1."""
    return -(model.story_mass * model.influence).reshape(-1, 1)


def _evaluate(density: Density, omegas: np.ndarray, width: int) -> np.ndarray:
    """Density values, shape (len(omegas), width)."""
    if callable(density):
        values = np.asarray(density(omegas), dtype=float)
        if values.ndim == 1:
            values = values[:, None]
    else:
        # scalar, or one constant density per channel
        values = np.asarray(density, dtype=float)
    return np.broadcast_to(values, (len(omegas), width))


def _psd_batch(
    omegas: np.ndarray,
    m: np.ndarray,
    c_obs: np.ndarray,
    k0: np.ndarray,
    b2: np.ndarray,
    c2e: np.ndarray,
    phi_ww: np.ndarray,
    phi_vv: np.ndarray,
) -> np.ndarray:
    w = omegas[:, None, None]
    a = k0 - w**2 * m + 1j * w * c_obs
    rhs = np.broadcast_to(np.hstack([b2, c2e]).astype(complex), (len(omegas),) + (m.shape[0], b2.shape[1] + c2e.shape[1]))
    try:
        g = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        raise SingularityError("observer dynamic stiffness is singular on the grid") from None
    if not np.all(np.isfinite(g)):
        raise SingularityError("observer frequency response is not finite on the grid")
    r = b2.shape[1]
    g_w, g_v = g[:, :, :r], g[:, :, r:]
    phi = np.einsum("fir,fr,fjr->fij", g_w, phi_ww, g_w.conj())
    phi += np.einsum("fim,fm,fjm->fij", g_v, phi_vv, g_v.conj())
    return 0.5 * (phi + np.conj(np.swapaxes(phi, 1, 2)))


# ── Error PSD and covariance ──────────────────────────────────────


def error_psd(
    omega: float,
    m: np.ndarray,
    c: np.ndarray,
    k0: np.ndarray,
    layout: SensorLayout,
    gain: FeedbackGain,
    phi_ww: Density,
    phi_vv: Density,
    b2: np.ndarray,
) -> np.ndarray:
    """Estimation-error density matrix at one frequency (n x n, Hermitian).

    Phi_ee = Ho b2 Phi_ww b2' Ho* + Ho c2' E Phi_vv E' c2 Ho*, with
    Ho = (-M w^2 + (C + c2' E c2) i w + K0)^-1.
    """
    n = m.shape[0]
    c2 = layout.selection_matrix(n)
    e = gain.matrix
    c_obs = c + c2.T @ e @ c2
    dynamic = k0 - omega**2 * m + 1j * omega * c_obs
    if np.linalg.cond(dynamic) > 1.0 / np.finfo(float).eps:
        raise SingularityError(f"observer dynamic stiffness is singular at omega={omega:g} rad/s")
    b2 = np.asarray(b2, dtype=float).reshape(n, -1)
    omegas = np.array([float(omega)])
    result = _psd_batch(
        omegas, m, c_obs, k0, b2, c2.T @ e,
        _evaluate(phi_ww, omegas, b2.shape[1]),
        _evaluate(phi_vv, omegas, layout.m),
    )
    return result[0]


def closed_loop_poles(m: np.ndarray, c_obs: np.ndarray, k0: np.ndarray) -> np.ndarray:
    n = m.shape[0]
    m_inv = np.linalg.inv(m)
    state = np.block([[np.zeros((n, n)), np.eye(n)], [-m_inv @ k0, -m_inv @ c_obs]])
    return np.linalg.eigvals(state)


def _integrate_covariance(omegas, m, c_obs, k0, b2, c2e, phi_ww, phi_vv, m_channels) -> np.ndarray:
    phi = _psd_batch(
        omegas, m, c_obs, k0, b2, c2e,
        _evaluate(phi_ww, omegas, b2.shape[1]),
        _evaluate(phi_vv, omegas, m_channels),
    )
    # Phi(-w) = conj(Phi(w)): the two-sided integral is twice the real part.
    p = 2.0 * integrate.trapezoid(phi.real, omegas, axis=0)
    return 0.5 * (p + p.T)


def _finish(p: np.ndarray, metadata: dict) -> ErrorCovariance:
    if not np.all(np.isfinite(p)):
        return ErrorCovariance(P=p, P_isd=isd_from_covariance(p), metadata=metadata)
    eigenvalues, vectors = np.linalg.eigh(p)
    smallest = float(eigenvalues.min())
    if smallest < 0:
        scale = max(float(np.abs(eigenvalues).max()), np.finfo(float).tiny)
        if smallest > -1e-10 * scale:
            p = vectors @ np.diag(np.clip(eigenvalues, 0.0, None)) @ vectors.T
            metadata["clipped_eigenvalue"] = smallest
        else:
            logger.warning("Covariance has a negative eigenvalue %.3g", smallest)
            metadata["negative_eigenvalue"] = smallest
    return ErrorCovariance(P=p, P_isd=isd_from_covariance(p), metadata=metadata)


def estimation_covariance(
    model: BuildingModel,
    layout: SensorLayout,
    gain: FeedbackGain,
    phi_ww: Density,
    phi_vv: Density,
    freq_grid: FrequencyGrid | np.ndarray | None = None,
    b2: np.ndarray | None = None,
) -> ErrorCovariance:
    """Steady-state error covariance P by integrating Phi_ee over frequency."""
    m, c, k0 = assemble_matrices(model)
    c2 = layout.selection_matrix(model.n)
    e = gain.matrix
    c_obs = c + c2.T @ e @ c2
    c2e = c2.T @ e
    b2 = default_b2(model) if b2 is None else np.asarray(b2, dtype=float).reshape(model.n, -1)

    def covariance_on(omegas: np.ndarray) -> np.ndarray:
        return _integrate_covariance(omegas, m, c_obs, k0, b2, c2e, phi_ww, phi_vv, layout.m)

    metadata: dict = {"linearization": "initial-stiffness", "provenance": "design-stage"}
    if isinstance(freq_grid, np.ndarray):
        omegas = freq_grid
        p = covariance_on(omegas)
        metadata.update(grid_points=len(omegas), omega_max=float(omegas[-1]))
        return _finish(p, metadata)

    grid = freq_grid or FrequencyGrid()
    omega_max = grid.omega_max
    if omega_max is None:
        omega_max = grid.omega_factor * float(np.abs(closed_loop_poles(m, c_obs, k0)).max())
    omegas = np.linspace(0.0, omega_max, grid.points)
    p = covariance_on(omegas)
    metadata.update(grid_points=grid.points, omega_max=omega_max)

    if grid.refine_check:
        refined = covariance_on(np.linspace(0.0, omega_max, 2 * grid.points - 1))
        base = max(abs(np.trace(refined)), np.finfo(float).tiny)
        change = abs(np.trace(refined) - np.trace(p)) / base
        metadata["refinement_change"] = float(change)
        metadata["accuracy_warning"] = bool(change > 0.01)
        if change > 0.01:
            logger.warning("Frequency grid too coarse: trace(P) changes %.2f%% on refinement",
                           100.0 * change)
    return _finish(p, metadata)


def lyapunov_covariance(
    model: BuildingModel,
    layout: SensorLayout,
    gain: FeedbackGain,
    phi_ww: float,
    phi_vv: float | np.ndarray,
    b2: np.ndarray | None = None,
) -> ErrorCovariance:
    """Steady-state error covariance for white densities from the Lyapunov
    equation A X + X A' + B W B' = 0 of the error state [e, e']."""
    m, c, k0 = assemble_matrices(model)
    n = model.n
    c2 = layout.selection_matrix(n)
    e = gain.matrix
    c_obs = c + c2.T @ e @ c2
    b2 = default_b2(model) if b2 is None else np.asarray(b2, dtype=float).reshape(n, -1)
    r = b2.shape[1]

    m_inv = np.linalg.inv(m)
    a = np.block([[np.zeros((n, n)), np.eye(n)], [-m_inv @ k0, -m_inv @ c_obs]])
    b = np.vstack([np.zeros((n, r + layout.m)), m_inv @ np.hstack([b2, -c2.T @ e])])
    densities = np.concatenate([np.full(r, float(phi_ww)),
                                np.broadcast_to(np.asarray(phi_vv, dtype=float), (layout.m,))])
    # Two-sided density S gives white-noise intensity 2 pi S.
    w = np.diag(2.0 * math.pi * densities)
    x = linalg.solve_continuous_lyapunov(a, -b @ w @ b.T)
    p = 0.5 * (x[:n, :n] + x[:n, :n].T)
    return _finish(p, {"method": "lyapunov", "linearization": "initial-stiffness",
                       "provenance": "design-stage"})


# ── Gain optimisation ─────────────────────────────────────────────


def optimize_gain(
    model: BuildingModel,
    layout: SensorLayout,
    phi_ww: Density,
    phi_vv: Density,
    objective: str = TRACE_P,
    optimizer_cfg: OptimizerConfig | None = None,
    freq_grid: FrequencyGrid | None = None,
) -> FeedbackGain:
    """Diagonal E minimising trace(P) or trace(P_isd) by Nelder-Mead in log(E)."""
    if objective not in OBJECTIVES:
        raise ValidationError(f"objective must be one of {OBJECTIVES}, got '{objective}'")
    cfg = optimizer_cfg or OptimizerConfig()
    grid = freq_grid or FrequencyGrid()
    grid = FrequencyGrid(points=grid.points, omega_factor=grid.omega_factor,
                         omega_max=grid.omega_max, refine_check=False)
    layout.validate(model.n)
    size = layout.m

    log_lo, log_hi = np.log(cfg.bounds[0]), np.log(cfg.bounds[1])
    start_lo = np.clip(np.log(cfg.initial_range[0]), log_lo, log_hi)
    start_hi = np.clip(np.log(cfg.initial_range[1]), log_lo, log_hi)

    def raw(x: np.ndarray) -> float:
        gain = FeedbackGain(np.exp(np.clip(x, log_lo, log_hi)))
        cov = estimation_covariance(model, layout, gain, phi_ww, phi_vv, grid)
        return cov.trace if objective == TRACE_P else cov.trace_isd

    simplex = np.full((size + 1, size), start_lo)
    simplex[1:] += np.eye(size) * (start_hi - start_lo)

    try:
        reference = raw(simplex[0])
    except SingularityError as exc:
        raise OptimizationError(f"objective undefined at the initial gains: {exc}") from exc
    if not np.isfinite(reference):
        raise OptimizationError(f"objective is not finite at the initial gains ({reference})")
    reference = abs(reference) or 1.0

    def scaled(x: np.ndarray) -> float:
        try:
            value = raw(x)
        except SingularityError:
            return np.inf
        return value / reference if np.isfinite(value) else np.inf

    result = optimize.minimize(
        scaled,
        simplex[0],
        method="Nelder-Mead",
        bounds=[(log_lo, log_hi)] * size,
        options={
            "initial_simplex": simplex,
            "maxiter": cfg.max_iter,
            "xatol": 1e-4,
            "fatol": cfg.tolerance,
        },
    )
    e_diag = np.exp(np.clip(result.x, log_lo, log_hi))
    converged = bool(result.success)
    if not converged:
        logger.warning("Gain optimisation stopped without converging: %s", result.message)
    gain = FeedbackGain(
        E_diag=e_diag,
        objective=float(result.fun * reference),
        objective_kind=objective,
        iterations=int(result.nit),
        converged=converged,
    )
    logger.info(
        "Optimised gains for stories %s: %s N*s/m (%s = %.4g, %d iterations)",
        list(layout.measured_dofs),
        np.array2string(e_diag, precision=4),
        objective,
        gain.objective,
        gain.iterations,
    )
    return gain


# ── Observer run ──────────────────────────────────────────────────


def run_nmbo(
    model: BuildingModel,
    gain: FeedbackGain,
    layout: SensorLayout,
    velocity_measurements: Sequence[Record],
    integrator: IntegratorSettings | None = None,
    covariance: ErrorCovariance | None = None,
) -> ObserverSolution:
    """Integrate the observer driven by measured floor velocities.

    Records are given in layout order and must share dt and length.
    """
    settings = integrator or IntegratorSettings()
    layout.validate(model.n)
    if len(velocity_measurements) != layout.m:
        raise ValidationError(
            f"layout measures {layout.m} stories but {len(velocity_measurements)} records were given"
        )
    if len(gain.E_diag) != layout.m:
        raise ValidationError(f"gain has {len(gain.E_diag)} entries, layout has {layout.m}")
    first = velocity_measurements[0]
    for record in velocity_measurements:
        record.require_units(VELOCITY)
        if not math.isclose(record.dt, first.dt, rel_tol=1e-12):
            raise ValidationError(
                f"record '{record.channel}' has dt={record.dt}, expected {first.dt}"
            )
        if len(record) != len(first):
            raise ValidationError(
                f"record '{record.channel}' has {len(record)} samples, expected {len(first)}"
            )

    substeps = settings.substeps(first.dt)
    dt = first.dt / substeps
    y = np.column_stack([resample(record, substeps) for record in velocity_measurements])

    c2 = layout.selection_matrix(model.n)
    c2e = c2.T @ gain.matrix
    force = y @ c2e.T
    c_obs = observer_damping(model, layout, gain)
    logger.info("Running observer: %d channels, %d steps at dt=%g", layout.m, len(y), dt)
    history = integrate_newmark(model, c_obs, force, dt, settings)
    return ObserverSolution(q_hat=history, covariance=covariance, gain=gain, layout=layout)
