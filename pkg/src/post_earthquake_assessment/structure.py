"""Shear-building model: matrix assembly, story hysteresis and time stepping.

The building is an n-story lumped-mass shear building with relative
displacements q (with respect to the ground)::

    M q'' + C q' + f_R(q, z) = -M b1 ug''(t)

Story k connects floors k-1 and k (floor 0 is the ground). Story drift is
``T @ q`` with ``T = I - shift``, and story shears map back to floor forces
through ``T.T``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import ConvergenceError, UnitsError, ValidationError
from .records import ACCELERATION, Record

logger = logging.getLogger(__name__)

LINEAR = "linear"
BILINEAR = "bilinear"


@dataclass
class HysteresisLaw:
    """Story force-drift law (kinematic bilinear or linear)."""

    kind: str = LINEAR
    yield_drift: float = 0.0  # m
    post_yield_ratio: float = 0.0

    def validate(self, story: int) -> None:
        if self.kind not in (LINEAR, BILINEAR):
            raise ValidationError(f"story {story}: unknown hysteresis kind '{self.kind}'")
        if self.kind == BILINEAR:
            if not self.yield_drift > 0:
                raise ValidationError(f"story {story}: yield_drift must be positive")
            if not 0 <= self.post_yield_ratio < 1:
                raise ValidationError(f"story {story}: post_yield_ratio must lie in [0, 1)")

    def to_dict(self) -> dict:
        if self.kind == LINEAR:
            return {"kind": LINEAR}
        return {
            "kind": BILINEAR,
            "yield_drift": self.yield_drift,
            "post_yield_ratio": self.post_yield_ratio,
        }


@dataclass
class RayleighSpec:
    """Rayleigh damping anchored at two modes (1-based).

    ``modes=None`` anchors at modes 1 and min(3, n); a one-story model then
    gets the single-mode split alpha0 = xi*w, alpha1 = xi/w.
    """

    modes: tuple[int, int] | None = None
    ratios: tuple[float, float] = (0.02, 0.02)

    def to_dict(self) -> dict:
        data: dict = {"kind": "rayleigh", "ratios": list(self.ratios)}
        if self.modes is not None:
            data["modes"] = list(self.modes)
        return data


@dataclass
class BuildingModel:
    """n-story shear building (SI units)."""

    story_mass: np.ndarray  # kg
    story_stiffness: np.ndarray  # N/m
    story_height: np.ndarray  # m
    damping: RayleighSpec | np.ndarray = field(default_factory=RayleighSpec)
    hysteresis: list[HysteresisLaw] = field(default_factory=list)
    influence: np.ndarray | None = None

    _k: np.ndarray = field(init=False, repr=False, compare=False)
    _ratio: np.ndarray = field(init=False, repr=False, compare=False)
    _yield: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.story_mass = np.atleast_1d(np.asarray(self.story_mass, dtype=float))
        self.story_stiffness = np.atleast_1d(np.asarray(self.story_stiffness, dtype=float))
        self.story_height = np.atleast_1d(np.asarray(self.story_height, dtype=float))
        n = len(self.story_mass)
        if n < 1:
            raise ValidationError("model needs at least one story")
        for name in ("story_stiffness", "story_height"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        for name in ("story_mass", "story_stiffness", "story_height"):
            values = getattr(self, name)
            if not np.all(np.isfinite(values)) or np.any(values <= 0):
                raise ValidationError(f"{name} must be strictly positive")

        if not self.hysteresis:
            self.hysteresis = [HysteresisLaw() for _ in range(n)]
        elif isinstance(self.hysteresis, HysteresisLaw):
            self.hysteresis = [self.hysteresis] * n
        if len(self.hysteresis) != n:
            raise ValidationError(f"expected {n} hysteresis laws, got {len(self.hysteresis)}")
        for k, law in enumerate(self.hysteresis, start=1):
            law.validate(k)

        if self.influence is None:
            self.influence = np.ones(n)
        self.influence = np.asarray(self.influence, dtype=float).reshape(n)

        if not isinstance(self.damping, RayleighSpec):
            matrix = np.asarray(self.damping, dtype=float)
            if matrix.shape != (n, n):
                raise ValidationError(f"damping matrix must be {n}x{n}")
            if not np.allclose(matrix, matrix.T):
                raise ValidationError("damping matrix must be symmetric")
            self.damping = matrix

        # Per-story arrays for the vectorised restoring force. Linear
        # stories use ratio 1 so the hysteretic branch carries no force.
        bilinear = np.array([law.kind == BILINEAR for law in self.hysteresis])
        self._k = self.story_stiffness.copy()
        self._ratio = np.array(
            [law.post_yield_ratio if law.kind == BILINEAR else 1.0 for law in self.hysteresis]
        )
        self._yield = np.where(
            bilinear, [law.yield_drift for law in self.hysteresis], 1.0
        )

    @property
    def n(self) -> int:
        return len(self.story_mass)

    @property
    def is_linear(self) -> bool:
        return all(law.kind == LINEAR for law in self.hysteresis)

    # ── Serialisation ──

    def to_dict(self) -> dict:
        if isinstance(self.damping, RayleighSpec):
            damping = self.damping.to_dict()
        else:
            damping = {"kind": "matrix", "matrix": self.damping.tolist()}
        return {
            "units": "SI",
            "story_mass": self.story_mass.tolist(),
            "story_stiffness": self.story_stiffness.tolist(),
            "story_height": self.story_height.tolist(),
            "damping": damping,
            "hysteresis": [law.to_dict() for law in self.hysteresis],
            "influence": self.influence.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> BuildingModel:
        units = data.get("units", "SI")
        if units != "SI":
            raise UnitsError(f"building model units must be 'SI', got '{units}'")
        n = len(data["story_mass"])

        damping_data = data.get("damping") or {"kind": "rayleigh"}
        if damping_data.get("kind", "rayleigh") == "matrix":
            damping: RayleighSpec | np.ndarray = np.asarray(damping_data["matrix"], dtype=float)
        else:
            modes = damping_data.get("modes")
            damping = RayleighSpec(
                modes=tuple(modes) if modes is not None else None,
                ratios=tuple(damping_data.get("ratios", (0.02, 0.02))),
            )

        raw_laws = data.get("hysteresis") or {"kind": LINEAR}
        if isinstance(raw_laws, dict):
            raw_laws = [raw_laws] * n
        laws = [
            HysteresisLaw(
                kind=item.get("kind", LINEAR),
                yield_drift=item.get("yield_drift", 0.0),
                post_yield_ratio=item.get("post_yield_ratio", 0.0),
            )
            for item in raw_laws
        ]
        return cls(
            story_mass=data["story_mass"],
            story_stiffness=data["story_stiffness"],
            story_height=data["story_height"],
            damping=damping,
            hysteresis=laws,
            influence=data.get("influence"),
        )

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> BuildingModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ResponseHistory:
    """Sampled response. Arrays are (steps, n)."""

    dt: float
    q: np.ndarray
    qdot: np.ndarray
    qddot: np.ndarray
    z: np.ndarray
    force: np.ndarray | None = None  # external floor forces used, (steps, n)

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValidationError("response dt must be positive")
        shapes = {a.shape for a in (self.q, self.qdot, self.qddot, self.z)}
        if len(shapes) != 1:
            raise ValidationError("response arrays must share length and story dimension")

    @property
    def steps(self) -> int:
        return self.q.shape[0]

    @property
    def n(self) -> int:
        return self.q.shape[1]

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt

    def story_drift(self) -> np.ndarray:
        """Story drift histories q_k - q_{k-1} (m)."""
        return self.q @ drift_operator(self.n).T


@dataclass
class IntegratorSettings:
    """Newmark-beta with Newton-Raphson equilibrium iterations."""

    beta: float = 0.25
    gamma: float = 0.5
    dt: float | None = None  # None → record dt
    newton_tol: float = 1e-8
    max_iter: int = 50

    def substeps(self, record_dt: float) -> int:
        if not self.beta > 0 or not self.gamma > 0:
            raise ValidationError(f"invalid Newmark parameters beta={self.beta}, gamma={self.gamma}")
        if self.dt is None:
            return 1
        ratio = record_dt / self.dt
        count = int(round(ratio))
        if count < 1 or abs(ratio - count) > 1e-9 * max(ratio, 1.0):
            raise ValidationError(
                f"integrator dt {self.dt} does not subdivide record dt {record_dt}"
            )
        return count


@dataclass
class RestoringForce:
    story_shear: np.ndarray
    dof_force: np.ndarray
    tangent: np.ndarray  # story tangent stiffness
    z: np.ndarray


@dataclass
class EnergyBalance:
    """Cumulative energies (J) at the end of a run."""

    input: float
    kinetic: float
    restoring: float
    damping: float

    @property
    def residual(self) -> float:
        return self.input - self.kinetic - self.restoring - self.damping

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.input), self.kinetic + abs(self.restoring) + abs(self.damping), 1e-300)
        return abs(self.residual) / scale


# ── Assembly ──────────────────────────────────────────────────────


def drift_operator(n: int) -> np.ndarray:
    """Matrix T with story drift = T @ q (floor 0 is the ground)."""
    return np.eye(n) - np.eye(n, k=-1)


def _shear_assembly(story_values: np.ndarray) -> np.ndarray:
    t = drift_operator(len(story_values))
    return t.T @ np.diag(story_values) @ t


def natural_frequencies(model: BuildingModel) -> np.ndarray:
    """Undamped circular frequencies (rad/s) of the initial-stiffness model."""
    eigenvalues = linalg.eigh(_shear_assembly(model.story_stiffness), np.diag(model.story_mass),
                              eigvals_only=True)
    return np.sqrt(np.clip(eigenvalues, 0.0, None))


def _rayleigh(model: BuildingModel, m: np.ndarray, k0: np.ndarray) -> np.ndarray:
    spec = model.damping
    omega = natural_frequencies(model)
    n = model.n
    if spec.modes is None:
        if n == 1:
            xi = spec.ratios[0]
            return xi * omega[0] * m + xi / omega[0] * k0
        modes = (1, min(3, n))
    else:
        modes = tuple(spec.modes)
    i, j = modes
    if not (1 <= i <= n and 1 <= j <= n):
        raise ValidationError(f"Rayleigh anchor modes {modes} outside 1..{n}")
    wi, wj = omega[i - 1], omega[j - 1]
    if np.isclose(wi, wj, rtol=1e-12, atol=0.0):
        raise ValidationError(f"Rayleigh anchors {modes} have equal frequencies; spec is singular")
    system = np.array([[1.0 / wi, wi], [1.0 / wj, wj]])
    alpha0, alpha1 = np.linalg.solve(system, 2.0 * np.asarray(spec.ratios, dtype=float))
    logger.debug("Rayleigh damping: alpha0=%.6g, alpha1=%.6g (modes %d, %d)", alpha0, alpha1, i, j)
    return alpha0 * m + alpha1 * k0


def assemble_matrices(model: BuildingModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (M, C, K0)."""
    m = np.diag(model.story_mass)
    k0 = _shear_assembly(model.story_stiffness)
    if isinstance(model.damping, RayleighSpec):
        c = _rayleigh(model, m, k0)
    else:
        c = np.array(model.damping, dtype=float)
    return m, c, k0


def modal_damping_ratios(model: BuildingModel) -> np.ndarray:
    """Damping ratio of each undamped mode, diag(Phi.T C Phi) / (2 w)."""
    m, c, k0 = assemble_matrices(model)
    eigenvalues, phi = linalg.eigh(k0, m)
    omega = np.sqrt(eigenvalues)
    return np.diag(phi.T @ c @ phi) / (2.0 * omega)


# ── Restoring force ───────────────────────────────────────────────


def restoring_force(
    model: BuildingModel,
    drift: np.ndarray,
    drift_rate: np.ndarray,
    z: np.ndarray,
) -> RestoringForce:
    """Story shears for the given drifts, starting from hysteresis state ``z``.

    ``z`` holds the plastic drift of each story; it stays zero for linear
    stories. The bilinear law is an elastic spring (r*k) in parallel with an
    elastic-perfectly-plastic spring ((1-r)*k, yield at ``yield_drift``),
    which gives kinematic hardening with elastic unloading at slope k.
    ``drift_rate`` is accepted for rate-dependent laws; both laws here are
    rate independent.
    """
    drift = np.asarray(drift, dtype=float)
    k, r, dy = model._k, model._ratio, model._yield
    hysteretic = (1.0 - r) * k
    trial = hysteretic * (drift - z)
    limit = hysteretic * dy
    yielding = np.abs(trial) > limit
    z_new = np.where(yielding, drift - np.sign(trial) * dy, z)
    shear = r * k * drift + hysteretic * (drift - z_new)
    tangent = np.where(yielding, r * k, k)
    t = drift_operator(model.n)
    return RestoringForce(story_shear=shear, dof_force=t.T @ shear, tangent=tangent, z=z_new)


# ── Time integration ──────────────────────────────────────────────


def resample(record: Record, substeps: int) -> np.ndarray:
    """Linearly interpolate a record onto ``substeps`` points per sample."""
    if substeps == 1:
        return record.samples.copy()
    coarse = np.arange(len(record))
    fine = np.arange((len(record) - 1) * substeps + 1) / substeps
    return np.interp(fine, coarse, record.samples)


def integrate_newmark(
    model: BuildingModel,
    damping: np.ndarray,
    force: np.ndarray,
    dt: float,
    settings: IntegratorSettings | None = None,
    q0: np.ndarray | None = None,
    v0: np.ndarray | None = None,
) -> ResponseHistory:
    """Integrate M q'' + damping q' + f_R(q, z) = force(t) from rest.

    ``force`` holds the external floor forces at every integrator step,
    shape (steps, n).
    """
    settings = settings or IntegratorSettings()
    beta, gamma = settings.beta, settings.gamma
    n = model.n
    steps = force.shape[0]
    m = np.diag(model.story_mass)
    k0 = _shear_assembly(model.story_stiffness)
    t = drift_operator(n)

    a0 = 1.0 / (beta * dt * dt)
    a1 = gamma / (beta * dt)
    a2 = 1.0 / (beta * dt)
    a3 = 1.0 / (2.0 * beta) - 1.0
    newton_limit = max(settings.max_iter // 2, 1)

    q_hist = np.zeros((steps, n))
    v_hist = np.zeros((steps, n))
    a_hist = np.zeros((steps, n))
    z_hist = np.zeros((steps, n))

    q = np.zeros(n) if q0 is None else np.asarray(q0, dtype=float).copy()
    v = np.zeros(n) if v0 is None else np.asarray(v0, dtype=float).copy()
    state = restoring_force(model, t @ q, t @ v, np.zeros(n))
    z = state.z
    a = np.linalg.solve(m, force[0] - damping @ v - state.dof_force) if steps else np.zeros(n)
    if steps:
        q_hist[0], v_hist[0], a_hist[0], z_hist[0] = q, v, a, z

    for i in range(1, steps):
        p = force[i]
        history = m @ (a2 * v + a3 * a)
        q_new = q.copy()
        for iteration in range(settings.max_iter):
            a_new = a0 * (q_new - q) - a2 * v - a3 * a
            v_new = v + dt * ((1.0 - gamma) * a + gamma * a_new)
            state = restoring_force(model, t @ q_new, t @ v_new, z)
            inertia = m @ a_new
            viscous = damping @ v_new
            residual = p - inertia - viscous - state.dof_force
            scale = (
                np.linalg.norm(p)
                + np.linalg.norm(inertia)
                + np.linalg.norm(viscous)
                + np.linalg.norm(state.dof_force)
                + np.linalg.norm(history)
            )
            error = np.linalg.norm(residual)
            if not np.isfinite(error):
                raise ConvergenceError("response diverged (non-finite residual)", step=i)
            if error <= settings.newton_tol * scale:
                break
            if iteration < newton_limit:
                stiffness = t.T @ np.diag(state.tangent) @ t
            else:
                # Initial-stiffness iterations always contract for the
                # hardening laws used here.
                stiffness = k0
            q_new = q_new + np.linalg.solve(stiffness + a0 * m + a1 * damping, residual)
        else:
            raise ConvergenceError(
                f"Newton iterations did not converge within {settings.max_iter} iterations",
                step=i,
            )
        if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(a_new))):
            raise ConvergenceError("response diverged (non-finite values)", step=i)
        logger.debug("step %d converged in %d iterations", i, iteration)

        q, v, a, z = q_new, v_new, a_new, state.z
        q_hist[i], v_hist[i], a_hist[i], z_hist[i] = q, v, a, z

    return ResponseHistory(dt=dt, q=q_hist, qdot=v_hist, qddot=a_hist, z=z_hist, force=force)


def simulate_response(
    model: BuildingModel,
    ground_accel: Record,
    settings: IntegratorSettings | None = None,
    *,
    process_noise_density: float = 0.0,
    seed: int | None = None,
    q0: np.ndarray | None = None,
    v0: np.ndarray | None = None,
) -> ResponseHistory:
    """Nonlinear response of ``model`` to base acceleration ``ground_accel``.

    ``process_noise_density`` (two-sided, (m/s^2)^2 s) adds seeded white
    noise to the base acceleration; it is off by default.
    """
    settings = settings or IntegratorSettings()
    ground_accel.require_units(ACCELERATION)
    substeps = settings.substeps(ground_accel.dt)
    dt = ground_accel.dt / substeps
    ug = resample(ground_accel, substeps)

    if process_noise_density > 0:
        rng = np.random.default_rng(seed)
        sigma = np.sqrt(2.0 * np.pi * process_noise_density / dt)
        ug = ug + rng.normal(0.0, sigma, size=ug.shape)

    m, c, _ = assemble_matrices(model)
    force = -np.outer(ug, m @ model.influence)
    logger.debug("Simulating %d-story model: %d steps at dt=%g", model.n, len(ug), dt)
    return integrate_newmark(model, c, force, dt, settings, q0=q0, v0=v0)


def energy_balance(model: BuildingModel, history: ResponseHistory) -> EnergyBalance:
    """Energy terms accumulated with the average-acceleration identities."""
    _, c, _ = assemble_matrices(model)
    t = drift_operator(model.n)
    if history.force is None:
        raise ValidationError("response history carries no forcing")

    dq = np.diff(history.q, axis=0)
    force_avg = 0.5 * (history.force[1:] + history.force[:-1])
    v_avg = 0.5 * (history.qdot[1:] + history.qdot[:-1])
    drift = history.q @ t.T
    shear = model._ratio * model._k * drift + (1.0 - model._ratio) * model._k * (drift - history.z)
    dof_force = shear @ t
    f_avg = 0.5 * (dof_force[1:] + dof_force[:-1])
    m = np.diag(model.story_mass)

    def kinetic(v: np.ndarray) -> float:
        return 0.5 * float(v @ m @ v)

    return EnergyBalance(
        input=float(np.sum(dq * force_avg)),
        kinetic=kinetic(history.qdot[-1]) - kinetic(history.qdot[0]),
        restoring=float(np.sum(dq * f_avg)),
        damping=float(np.sum(dq * (v_avg @ c.T))),
    )
