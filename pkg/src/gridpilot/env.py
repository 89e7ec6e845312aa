"""Volt-VAr control MDP: states, actions, barrier reward, environment step.

One environment step is the full physical pipeline: map the agent's zone
coefficients to inverter reactive setpoints, superimpose them on the
scenario's injections, solve the power flow, take the feeder-head
measurement, and produce the next state either from the state estimator or
(in perfect-state mode) from the true solver voltages. The reward is always
computed from true solver voltages; estimation error only affects what the
agent observes.

Sign conventions: positive q setpoint injects reactive power (raises local
voltage), negative absorbs. Reward is never positive; zero only for an
exactly nominal profile with no curtailment-barrier violation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PowerFlowDivergedError
from .feeder import AdmittanceMatrix, Feeder, build_admittance
from .powerflow import (
    MeasurementVector,
    feeder_head_measurement,
    slack_indices,
    solve_power_flow,
)
from .scenario import Scenario, to_injections

log = logging.getLogger(__name__)

DIVERGENCE_PENALTY_PER_NODE = -10.0


@dataclass
class MdpState:
    v_mag: np.ndarray  # node-phase voltage magnitudes, p.u.

    def as_vector(self) -> np.ndarray:
        return self.v_mag


@dataclass
class MdpAction:
    coefficients: np.ndarray  # one per zone, in [-1, 1]

    def __post_init__(self):
        self.coefficients = np.atleast_1d(np.asarray(self.coefficients, dtype=float))


@dataclass
class RewardConfig:
    lambda_weight: float = 1.0
    eta_weight: float = 0.5
    v_min: float = 0.95
    v_max: float = 1.05
    v_nominal: float = 1.0

    def __post_init__(self):
        if not self.v_min < self.v_nominal < self.v_max:
            raise ValueError("need v_min < v_nominal < v_max")
        if self.lambda_weight < 0 or self.eta_weight < 0:
            raise ValueError("barrier weights must be nonnegative")


@dataclass
class EnvConfig:
    feeder: Feeder
    estimator: object = None  # DsseModel; None means perfect-state mode
    horizon: int = 20
    measurement_noise_pct: float = 0.0
    zone_map: np.ndarray | None = None  # pv unit -> zone index; default all zone 0
    slack_voltage: float = 1.0
    reward: RewardConfig = field(default_factory=RewardConfig)
    admittance: AdmittanceMatrix = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        n_pv = len(self.feeder.pv_units)
        if self.zone_map is None:
            self.zone_map = np.zeros(n_pv, dtype=int)
        else:
            self.zone_map = np.asarray(self.zone_map, dtype=int)
            if self.zone_map.shape != (n_pv,):
                raise ValueError(f"zone_map must cover all {n_pv} pv units")
        if self.admittance is None:
            self.admittance = build_admittance(self.feeder)

    @property
    def n_zones(self) -> int:
        return int(self.zone_map.max()) + 1 if self.zone_map.size else 1

    @property
    def state_dim(self) -> int:
        return self.feeder.n_node_phases


def q_max_no_curtailment(s_rated: float, p_pv: float) -> float:
    """Largest reactive magnitude the inverter can carry without curtailing."""
    if p_pv < 0 or p_pv > s_rated:
        raise ValueError(f"p_pv={p_pv} outside [0, s_rated={s_rated}]")
    return math.sqrt(s_rated * s_rated - p_pv * p_pv)


def q_max_vector(feeder: Feeder, scenario: Scenario) -> np.ndarray:
    return np.array([q_max_no_curtailment(pv.s_rated, scenario.p_pv[k])
                     for k, pv in enumerate(feeder.pv_units)])


def map_action(action: MdpAction, pv_units, zone_map) -> np.ndarray:
    """Reactive setpoints q[k] = a[zone(k)] * q_rated[k], bounded by ratings.

    Out-of-range coefficients are clamped to [-1, 1] (and logged); the final
    hard clamp to +-q_rated keeps the rating bound even if a caller bypasses
    the coefficient clamp.
    """
    coeff = action.coefficients
    clamped = np.clip(coeff, -1.0, 1.0)
    if not np.array_equal(coeff, clamped):
        log.debug("action coefficients clamped: %s", coeff)
    q_rated = np.array([pv.q_rated for pv in pv_units])
    q = clamped[zone_map] * q_rated if len(pv_units) else np.zeros(0)
    return np.clip(q, -q_rated, q_rated)


def voltage_barrier(v: float, cfg: RewardConfig) -> float:
    """Quadratic inside the [v_min, v_max] band (inclusive), absolute outside."""
    dev = v - cfg.v_nominal
    if cfg.v_min <= v <= cfg.v_max:
        return dev * dev
    return abs(dev)


def _voltage_barrier_vec(v: np.ndarray, cfg: RewardConfig) -> np.ndarray:
    dev = v - cfg.v_nominal
    in_band = (v >= cfg.v_min) & (v <= cfg.v_max)
    return np.where(in_band, dev * dev, np.abs(dev))


def curtailment_barrier(q: float, q_max: float) -> float:
    """Zero up to the no-curtailment limit, linear excess beyond it."""
    if q_max < 0:
        raise ValueError("q_max must be nonnegative")
    return max(abs(q) - q_max, 0.0)


def reward(v_mags: np.ndarray, q_setpoints: np.ndarray, q_max_values: np.ndarray,
           cfg: RewardConfig) -> float:
    """r = -(lambda * sum voltage barriers + eta * sum curtailment barriers)."""
    if q_setpoints.shape != q_max_values.shape:
        raise ValueError("q_setpoints and q_max_values must align")
    lam = _voltage_barrier_vec(np.asarray(v_mags, dtype=float), cfg).sum()
    gam = np.maximum(np.abs(q_setpoints) - q_max_values, 0.0).sum()
    return float(-(cfg.lambda_weight * lam + cfg.eta_weight * gam))


def objective_deviation(v_mags: np.ndarray, v_nominal: float = 1.0) -> float:
    """Sum of absolute voltage deviations from nominal (the tracking metric)."""
    return float(np.abs(np.asarray(v_mags, dtype=float) - v_nominal).sum())


def env_step(cfg: EnvConfig, scenario: Scenario, action: MdpAction,
             rng: np.random.Generator | None = None) -> tuple[MdpState, float, dict]:
    """Apply an action to a scenario and observe the resulting system.

    Returns (next_state, reward, info). info carries the true voltages, the
    feeder-head P/Q, the realized setpoints, and a terminal flag. Power-flow
    divergence under the action yields a large negative reward scaled by the
    node-phase count and terminal=True; the placeholder next state is a flat
    nominal profile (never bootstrapped from, since the transition is
    terminal).
    """
    q_set = map_action(action, cfg.feeder.pv_units, cfg.zone_map)
    injections = to_injections(cfg.feeder, cfg.admittance, scenario, q_pv=q_set)
    q_max_vals = q_max_vector(cfg.feeder, scenario)

    try:
        sol = solve_power_flow(cfg.feeder, cfg.admittance, injections,
                               slack_voltage=cfg.slack_voltage)
    except PowerFlowDivergedError as exc:
        log.warning("power flow diverged under action %s: %s", action.coefficients, exc)
        n = cfg.state_dim
        placeholder = MdpState(v_mag=np.full(n, cfg.reward.v_nominal))
        info = {"terminal": True, "diverged": True, "q_setpoints": q_set,
                "residual": exc.residual, "iterations": exc.iterations}
        return placeholder, DIVERGENCE_PENALTY_PER_NODE * n, info

    r = reward(sol.v_mag, q_set, q_max_vals, cfg.reward)

    sigma = cfg.measurement_noise_pct / 100.0
    meas = feeder_head_measurement(cfg.feeder, cfg.admittance, sol,
                                   noise_sigma=sigma,
                                   rng=rng if sigma > 0 else None)
    if cfg.estimator is not None:
        from .dsse import estimate_states
        est = estimate_states(cfg.estimator, meas,
                              expected_fingerprint=cfg.feeder.fingerprint)
        state = MdpState(v_mag=est.v_mag)
    else:
        state = MdpState(v_mag=sol.v_mag.copy())

    slack = slack_indices(cfg.feeder, cfg.admittance)
    v = sol.v_complex
    i_inj = (cfg.admittance.g + 1j * cfg.admittance.b) @ v
    s_head = v[slack] * np.conj(i_inj[slack])

    band = cfg.reward
    info = {
        "terminal": False,
        "diverged": False,
        "v_mag_true": sol.v_mag,
        "v_ang_deg_true": sol.v_ang_deg,
        "q_setpoints": q_set,
        "q_max": q_max_vals,
        "p_head": float(s_head.real.sum()),
        "q_head": float(s_head.imag.sum()),
        "measurement": meas,
        "violations": int(np.sum((sol.v_mag < band.v_min) | (sol.v_mag > band.v_max))),
        "deviation": objective_deviation(sol.v_mag, band.v_nominal),
        "iterations": sol.iterations,
    }
    return state, r, info


class Env:
    """Episode wrapper: one scenario held fixed for ``horizon`` steps.

    reset() observes the zero-action system to produce the initial state;
    step() applies an action and advances until the horizon or a divergence
    terminal. Holds its own RNG stream for measurement noise.
    """

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng()
        self.scenario = None
        self.t = 0

    def reset(self, scenario: Scenario) -> MdpState:
        self.scenario = scenario
        self.t = 0
        zero = MdpAction(np.zeros(self.cfg.n_zones))
        state, _, info = env_step(self.cfg, scenario, zero, rng=self.rng)
        if info["terminal"]:
            raise PowerFlowDivergedError(
                f"scenario {scenario.id} infeasible at zero action",
                info["residual"], info["iterations"])
        return state

    def step(self, action: MdpAction) -> tuple[MdpState, float, bool, dict]:
        if self.scenario is None:
            raise RuntimeError("call reset() before step()")
        state, r, info = env_step(self.cfg, self.scenario, action, rng=self.rng)
        self.t += 1
        done = info["terminal"] or self.t >= self.cfg.horizon
        return state, r, done, info
