"""Synthetic load/PV snapshot generation, persistence, and splitting.

A scenario is one feeder-wide snapshot: active/reactive power per load point
and active PV output per inverter, all p.u. Scenarios are built by combining
household-level profiles from a small pool, mimicking aggregation of a few
metered houses onto each distribution node. PV output is tied to the local
load through a per-household ratio so realized node-level pv/load ratios stay
inside the configured range before rating clips.

Persistence is a CSV of (scenario, element, p, q) rows plus a JSON sidecar
carrying the generator config, seed, and feeder fingerprint. Repeated
generation with the same config and seed writes byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DatasetError
from .feeder import AdmittanceMatrix, Feeder
from .powerflow import InjectionSet

CSV_HEADER = "scenario_id, element_type, element_id, p_pu, q_pu"

# lognormal shape parameter for household load diversity; the pool is
# min-max rescaled into load_scale_range afterwards, so only the shape
# (right skew) of this draw matters
_LOAD_SIGMA = 0.5


@dataclass
class GenConfig:
    count: int
    pv_to_load_ratio_range: tuple[float, float] = (0.74, 1.05)
    load_scale_range: tuple[float, float] = (0.005, 0.03)
    power_factor_range: tuple[float, float] = (0.95, 1.0)
    household_pool_size: int = 11
    households_per_node: int = 2

    def __post_init__(self):
        if self.count < 1:
            raise DatasetError("count must be >= 1")
        if self.household_pool_size < 1 or self.households_per_node < 1:
            raise DatasetError("pool size and households per node must be >= 1")
        for name in ("pv_to_load_ratio_range", "load_scale_range", "power_factor_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise DatasetError(f"{name} must satisfy low <= high")
        lo, hi = self.power_factor_range
        if lo < 0.85 or hi > 1.0:
            raise DatasetError("power_factor_range must stay within [0.85, 1.0]")


@dataclass
class Scenario:
    id: int
    p_load: np.ndarray  # p.u., aligned with feeder.loads
    q_load: np.ndarray
    p_pv: np.ndarray  # p.u., aligned with feeder.pv_units


@dataclass
class ScenarioSet:
    scenarios: list[Scenario]
    seed: int
    generator_config: GenConfig
    feeder_fingerprint: str = ""

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)


@dataclass
class HouseholdPool:
    load: np.ndarray  # p.u. active power per household
    pv: np.ndarray  # p.u. PV output per household, ratio-tied to load

    @property
    def size(self) -> int:
        return self.load.shape[0]


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate_household_pool(config: GenConfig, seed) -> HouseholdPool:
    """Draw a pool of household (load, pv) pairs.

    Loads take a lognormal shape min-max rescaled into load_scale_range;
    each household's PV is its load times a clipped-Gaussian ratio spanning
    pv_to_load_ratio_range. Deterministic for a given seed; passing a
    Generator continues that stream instead.
    """
    rng = _as_rng(seed)
    n = config.household_pool_size
    lo, hi = config.load_scale_range

    raw = rng.lognormal(mean=0.0, sigma=_LOAD_SIGMA, size=n)
    spread = raw.max() - raw.min()
    if n == 1 or spread == 0.0:
        load = np.full(n, 0.5 * (lo + hi))
    else:
        load = lo + (hi - lo) * (raw - raw.min()) / spread

    rlo, rhi = config.pv_to_load_ratio_range
    ratio = np.clip(rng.normal(0.5 * (rlo + rhi), 0.25 * (rhi - rlo), size=n), rlo, rhi)
    return HouseholdPool(load=load, pv=ratio * load)


def aggregate_profiles(pool: HouseholdPool, feeder: Feeder, config: GenConfig,
                       seed, scenario_id: int = 0) -> Scenario:
    """Combine pool households into one feeder snapshot.

    Every load point sums ``households_per_node`` randomly chosen pool
    entries; its reactive power follows a power factor sampled per point.
    A PV unit takes the pv aggregated at its own (bus, phase) load point,
    clipped to [0, p_rated]; units without a co-located load point draw
    their own households.
    """
    if pool.size < 1:
        raise DatasetError("household pool is empty")
    rng = _as_rng(seed)
    n_loads = len(feeder.loads)

    choice = rng.integers(0, pool.size, size=(n_loads, config.households_per_node))
    p_load = pool.load[choice].sum(axis=1)
    pv_at_load = pool.pv[choice].sum(axis=1)

    pf = rng.uniform(config.power_factor_range[0], config.power_factor_range[1], size=n_loads)
    q_load = p_load * np.tan(np.arccos(np.clip(pf, 0.0, 1.0)))

    load_slot = {(ld.bus_id, ld.phase): i for i, ld in enumerate(feeder.loads)}
    p_pv = np.zeros(len(feeder.pv_units))
    for k, pv in enumerate(feeder.pv_units):
        slot = load_slot.get((pv.bus_id, pv.phase))
        if slot is None:
            own = rng.integers(0, pool.size, size=config.households_per_node)
            raw_pv = pool.pv[own].sum()
        else:
            raw_pv = pv_at_load[slot]
        p_pv[k] = min(max(raw_pv, 0.0), pv.p_rated)

    return Scenario(id=scenario_id, p_load=p_load, q_load=q_load, p_pv=p_pv)


def generate_scenario_set(feeder: Feeder, config: GenConfig, seed: int) -> ScenarioSet:
    """Generate ``config.count`` scenarios on one deterministic stream.

    A fresh household pool is drawn per scenario so feeder-wide conditions
    (total load, prevailing pv/load ratio) vary between snapshots.
    """
    rng = np.random.default_rng(seed)
    scenarios = []
    for i in range(config.count):
        pool = generate_household_pool(config, rng)
        scenarios.append(aggregate_profiles(pool, feeder, config, rng, scenario_id=i))
    return ScenarioSet(scenarios=scenarios, seed=seed, generator_config=config,
                       feeder_fingerprint=feeder.fingerprint)


def split(scenario_set: ScenarioSet, train_fraction: float, seed: int
          ) -> tuple[ScenarioSet, ScenarioSet]:
    """Random disjoint, exhaustive partition preserving scenario ids."""
    n = len(scenario_set)
    if n < 2:
        raise DatasetError("need at least 2 scenarios to split")
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must be strictly between 0 and 1")
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)  # both halves stay nonempty

    order = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(order[:n_train])
    test_idx = sorted(order[n_train:])

    def subset(idx):
        return ScenarioSet(scenarios=[scenario_set.scenarios[i] for i in idx],
                           seed=scenario_set.seed,
                           generator_config=scenario_set.generator_config,
                           feeder_fingerprint=scenario_set.feeder_fingerprint)

    return subset(train_idx), subset(test_idx)


def ingest_household_csv(path, base_power_kva: float) -> HouseholdPool:
    """Read real household profiles (household_id, p_kw, pv_kw) as a pool."""
    loads, pvs = [], []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [c.strip() for c in next(reader)]
            if header != ["household_id", "p_kw", "pv_kw"]:
                raise DatasetError(f"unexpected household CSV header {header}")
            for row in reader:
                if not row:
                    continue
                loads.append(float(row[1]) / base_power_kva)
                pvs.append(float(row[2]) / base_power_kva)
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if not loads:
        raise DatasetError(f"no household rows in {path}")
    return HouseholdPool(load=np.array(loads), pv=np.array(pvs))


def _sidecar_path(csv_path) -> str:
    return os.fspath(csv_path) + ".meta.json"


def write_scenario_set(scenario_set: ScenarioSet, feeder: Feeder, csv_path) -> None:
    """Persist as CSV rows plus a JSON sidecar with config/seed/fingerprint.

    Floats are written with repr (shortest round-trip form), so identical
    values produce identical bytes.
    """
    lines = [CSV_HEADER]
    for sc in scenario_set.scenarios:
        for i, ld in enumerate(feeder.loads):
            lines.append(f"{sc.id},load,{ld.bus_id}.{ld.phase},"
                         f"{float(sc.p_load[i])!r},{float(sc.q_load[i])!r}")
        for k, pv in enumerate(feeder.pv_units):
            lines.append(f"{sc.id},pv,{pv.bus_id}.{pv.phase},{float(sc.p_pv[k])!r},0.0")
    with open(csv_path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")

    meta = {
        "seed": scenario_set.seed,
        "generator_config": asdict(scenario_set.generator_config),
        "feeder_fingerprint": scenario_set.feeder_fingerprint or feeder.fingerprint,
        "scenario_count": len(scenario_set),
    }
    with open(_sidecar_path(csv_path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_scenario_set(csv_path, feeder: Feeder) -> ScenarioSet:
    """Load a persisted scenario set, checking elements against the feeder."""
    try:
        with open(_sidecar_path(csv_path)) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"missing or unreadable sidecar for {csv_path}: {exc}") from exc

    cfg_raw = dict(meta["generator_config"])
    for key in ("pv_to_load_ratio_range", "load_scale_range", "power_factor_range"):
        cfg_raw[key] = tuple(cfg_raw[key])
    config = GenConfig(**cfg_raw)

    fingerprint = meta.get("feeder_fingerprint", "")
    if fingerprint and fingerprint != feeder.fingerprint:
        raise DatasetError("scenario file was generated for a different feeder "
                           f"(fingerprint {fingerprint[:12]}... != {feeder.fingerprint[:12]}...)")

    load_slot = {f"{ld.bus_id}.{ld.phase}": i for i, ld in enumerate(feeder.loads)}
    pv_slot = {f"{pv.bus_id}.{pv.phase}": k for k, pv in enumerate(feeder.pv_units)}

    table: dict[int, Scenario] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader)]
        if header != [c.strip() for c in CSV_HEADER.split(",")]:
            raise DatasetError(f"unexpected scenario CSV header {header}")
        for row in reader:
            if not row:
                continue
            sid = int(row[0])
            sc = table.get(sid)
            if sc is None:
                sc = Scenario(id=sid, p_load=np.zeros(len(feeder.loads)),
                              q_load=np.zeros(len(feeder.loads)),
                              p_pv=np.zeros(len(feeder.pv_units)))
                table[sid] = sc
            etype, eid = row[1], row[2]
            p, q = float(row[3]), float(row[4])
            if etype == "load":
                if eid not in load_slot:
                    raise DatasetError(f"scenario {sid}: unknown load element {eid!r}")
                sc.p_load[load_slot[eid]] = p
                sc.q_load[load_slot[eid]] = q
            elif etype == "pv":
                if eid not in pv_slot:
                    raise DatasetError(f"scenario {sid}: unknown pv element {eid!r}")
                sc.p_pv[pv_slot[eid]] = p
            else:
                raise DatasetError(f"scenario {sid}: unknown element type {etype!r}")

    scenarios = [table[sid] for sid in sorted(table)]
    return ScenarioSet(scenarios=scenarios, seed=int(meta["seed"]),
                       generator_config=config,
                       feeder_fingerprint=fingerprint or feeder.fingerprint)


def to_injections(feeder: Feeder, admittance: AdmittanceMatrix, scenario: Scenario,
                  q_pv: np.ndarray | None = None) -> InjectionSet:
    """Net node-phase injections for one scenario, load-positive.

    PV active output and any reactive setpoints enter with negative sign
    (generation); source-bus entries stay zero, the slack balances them.
    """
    n = admittance.size
    p = np.zeros(n)
    q = np.zeros(n)
    for i, ld in enumerate(feeder.loads):
        idx = admittance.index_map[(ld.bus_id, ld.phase)]
        p[idx] += scenario.p_load[i]
        q[idx] += scenario.q_load[i]
    for k, pv in enumerate(feeder.pv_units):
        idx = admittance.index_map[(pv.bus_id, pv.phase)]
        p[idx] -= scenario.p_pv[k]
        if q_pv is not None:
            q[idx] -= q_pv[k]
    return InjectionSet(p=p, q=q)


def realized_pv_ratios(scenario_set: ScenarioSet, feeder: Feeder) -> np.ndarray:
    """Per-unit pv/load ratios over all scenarios, for distribution checks.

    Only PV units co-located with a load point contribute; rating clips can
    push realized ratios below the configured range, never above.
    """
    load_slot = {(ld.bus_id, ld.phase): i for i, ld in enumerate(feeder.loads)}
    out = []
    for sc in scenario_set:
        for k, pv in enumerate(feeder.pv_units):
            slot = load_slot.get((pv.bus_id, pv.phase))
            if slot is not None and sc.p_load[slot] > 0:
                out.append(sc.p_pv[k] / sc.p_load[slot])
    return np.array(out)
