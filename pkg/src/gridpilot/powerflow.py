"""Newton power flow in rectangular voltage coordinates.

The solver works on node-phase vectors: every bus-phase pair is one node with
a complex voltage V = v_re + j*v_im. The source bus phases are the slack
nodes, pinned to ``slack_voltage`` at 0/-120/+120 degrees for phases A/B/C.
Injections follow the load-positive convention (consumption is positive p/q,
generation negative), so the mismatch at node n is

    f_p[n] = v_re[n]*i_re[n] + v_im[n]*i_im[n] + p[n]
    f_q[n] = v_im[n]*i_re[n] - v_re[n]*i_im[n] + q[n]

with i = (G + jB) V the injected current. Both are driven below ``tol`` in
absolute terms; the Jacobian is analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PowerFlowDivergedError
from .feeder import PHASES, AdmittanceMatrix, Feeder

# slack phase angles, radians
PHASE_ANGLES = {"A": 0.0, "B": -2.0 * math.pi / 3.0, "C": 2.0 * math.pi / 3.0}

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50


@dataclass
class InjectionSet:
    """Per node-phase real/reactive power, p.u., load-positive.

    Vectors span every node-phase in admittance index order; source-bus
    entries must be zero (the slack absorbs the system imbalance).
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.p.shape != self.q.shape or self.p.ndim != 1:
            raise ValueError("p and q must be 1-d arrays of equal length")


@dataclass
class PowerFlowSolution:
    v_re: np.ndarray
    v_im: np.ndarray
    iterations: int
    residual: float
    converged: bool

    @property
    def v_complex(self) -> np.ndarray:
        return self.v_re + 1j * self.v_im

    @property
    def v_mag(self) -> np.ndarray:
        return np.hypot(self.v_re, self.v_im)

    @property
    def v_ang_deg(self) -> np.ndarray:
        return np.degrees(np.arctan2(self.v_im, self.v_re))


@dataclass
class MeasurementVector:
    """Feeder-head voltage and current phasors, one slot per phase letter.

    Slots for phases absent at the source bus stay zero. ``as_features``
    flattens to the fixed 12-float layout (v_re, v_im, i_re, i_im) x (A,B,C)
    used as the state-estimator input.
    """

    v_re: np.ndarray  # shape (3,)
    v_im: np.ndarray
    i_re: np.ndarray
    i_im: np.ndarray

    def as_features(self) -> np.ndarray:
        return np.concatenate([self.v_re, self.v_im, self.i_re, self.i_im])

    @classmethod
    def from_features(cls, features: np.ndarray) -> "MeasurementVector":
        features = np.asarray(features, dtype=float)
        if features.shape != (12,):
            raise ValueError(f"expected 12 features, got shape {features.shape}")
        return cls(v_re=features[0:3].copy(), v_im=features[3:6].copy(),
                   i_re=features[6:9].copy(), i_im=features[9:12].copy())


def slack_indices(feeder: Feeder, admittance: AdmittanceMatrix) -> np.ndarray:
    src = feeder.bus(feeder.source_bus_id)
    return np.array([admittance.index_map[(src.id, ph)] for ph in src.phases], dtype=int)


def slack_phasors(feeder: Feeder, slack_voltage: float) -> np.ndarray:
    src = feeder.bus(feeder.source_bus_id)
    return np.array([slack_voltage * np.exp(1j * PHASE_ANGLES[ph]) for ph in src.phases])


def flat_start(feeder: Feeder, admittance: AdmittanceMatrix, slack_voltage: float) -> np.ndarray:
    """Initial complex voltage: every node-phase at the slack phasor of its phase."""
    v = np.empty(admittance.size, dtype=complex)
    for (bus_id, ph), idx in admittance.index_map.items():
        v[idx] = slack_voltage * np.exp(1j * PHASE_ANGLES[ph])
    return v


def power_mismatch(admittance: AdmittanceMatrix, v: np.ndarray,
                   injections: InjectionSet) -> tuple[np.ndarray, np.ndarray]:
    """Mismatch vectors (f_p, f_q) at every node-phase for a voltage guess."""
    g, b = admittance.g, admittance.b
    v_re, v_im = v.real, v.imag
    i_re = g @ v_re - b @ v_im
    i_im = g @ v_im + b @ v_re
    f_p = v_re * i_re + v_im * i_im + injections.p
    f_q = v_im * i_re - v_re * i_im + injections.q
    return f_p, f_q


def residual_norm(admittance: AdmittanceMatrix, v: np.ndarray, injections: InjectionSet,
                  slack: np.ndarray) -> float:
    """Largest absolute power mismatch over the non-slack node-phases."""
    f_p, f_q = power_mismatch(admittance, v, injections)
    free = np.ones(admittance.size, dtype=bool)
    free[slack] = False
    return float(max(np.max(np.abs(f_p[free]), initial=0.0),
                     np.max(np.abs(f_q[free]), initial=0.0)))


def solve_power_flow(feeder: Feeder, admittance: AdmittanceMatrix, injections: InjectionSet,
                     slack_voltage: float = 1.0, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
    """Newton iteration from a flat start until the mismatch drops below tol.

    Raises PowerFlowDivergedError when the iteration budget runs out or the
    update turns non-finite; the exception carries the last residual so the
    caller can report how far off the solve ended.
    """
    n = admittance.size
    if injections.p.shape[0] != n:
        raise ValueError(f"injection length {injections.p.shape[0]} != {n} node-phases")
    g, b = admittance.g, admittance.b
    slack = slack_indices(feeder, admittance)

    free = np.ones(n, dtype=bool)
    free[slack] = False
    free_idx = np.where(free)[0]
    unknowns = np.concatenate([free_idx, n + free_idx])  # V_re block then V_im block

    v = flat_start(feeder, admittance, slack_voltage)
    v_re, v_im = v.real.copy(), v.imag.copy()

    residual = math.inf
    for iteration in range(1, max_iter + 1):
        i_re = g @ v_re - b @ v_im
        i_im = g @ v_im + b @ v_re
        f_p = v_re * i_re + v_im * i_im + injections.p
        f_q = v_im * i_re - v_re * i_im + injections.q
        residual = float(max(np.max(np.abs(f_p[free]), initial=0.0),
                             np.max(np.abs(f_q[free]), initial=0.0)))
        if not math.isfinite(residual):
            raise PowerFlowDivergedError("mismatch turned non-finite",
                                         residual=residual, iterations=iteration - 1)
        if residual < tol:
            return PowerFlowSolution(v_re=v_re, v_im=v_im, iterations=iteration - 1,
                                     residual=residual, converged=True)

        # analytic Jacobian, rectangular form
        dp_dvr = v_re[:, None] * g + v_im[:, None] * b
        np.fill_diagonal(dp_dvr, dp_dvr.diagonal() + i_re)
        dp_dvi = v_im[:, None] * g - v_re[:, None] * b
        np.fill_diagonal(dp_dvi, dp_dvi.diagonal() + i_im)
        dq_dvr = v_im[:, None] * g - v_re[:, None] * b
        np.fill_diagonal(dq_dvr, dq_dvr.diagonal() - i_im)
        dq_dvi = -v_im[:, None] * b - v_re[:, None] * g
        np.fill_diagonal(dq_dvi, dq_dvi.diagonal() + i_re)

        jac = np.block([[dp_dvr, dp_dvi], [dq_dvr, dq_dvi]])
        jac = jac[np.ix_(unknowns, unknowns)]
        rhs = np.concatenate([f_p[free_idx], f_q[free_idx]])
        try:
            step = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular Jacobian at iteration {iteration}") from exc

        n_free = free_idx.shape[0]
        v_re[free_idx] -= step[:n_free]
        v_im[free_idx] -= step[n_free:]

    raise PowerFlowDivergedError(
        f"no convergence after {max_iter} iterations (residual {residual:.3e})",
        residual=residual, iterations=max_iter)


def feeder_head_measurement(feeder: Feeder, admittance: AdmittanceMatrix,
                            solution: PowerFlowSolution, noise_sigma: float = 0.0,
                            rng: np.random.Generator | None = None) -> MeasurementVector:
    """Voltage and line-current phasors at the source bus.

    The current slot is the total current leaving the source bus into the
    feeder per phase, computed as the slack rows of Y @ V. Optional Gaussian
    noise is added per rectangular component with standard deviation
    ``noise_sigma`` times the phasor magnitude.
    """
    src = feeder.bus(feeder.source_bus_id)
    v = solution.v_complex
    i_all = (admittance.g + 1j * admittance.b) @ v

    out = {name: np.zeros(3) for name in ("v_re", "v_im", "i_re", "i_im")}
    for ph in src.phases:
        slot = PHASES.index(ph)
        idx = admittance.index_map[(src.id, ph)]
        out["v_re"][slot], out["v_im"][slot] = v[idx].real, v[idx].imag
        out["i_re"][slot], out["i_im"][slot] = i_all[idx].real, i_all[idx].imag

    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        v_scale = np.hypot(out["v_re"], out["v_im"])
        i_scale = np.hypot(out["i_re"], out["i_im"])
        out["v_re"] += noise_sigma * v_scale * rng.standard_normal(3)
        out["v_im"] += noise_sigma * v_scale * rng.standard_normal(3)
        out["i_re"] += noise_sigma * i_scale * rng.standard_normal(3)
        out["i_im"] += noise_sigma * i_scale * rng.standard_normal(3)

    return MeasurementVector(**out)
