"""Pipeline configuration: every tunable with its default, file parsing, hashing.

Config files are plain ``key = value`` lines; ``#`` starts a comment. Every key
can also be overridden with a CLI flag of the same name (dashes for
underscores). The config hash is embedded in all stage outputs so reruns can
be traced to their parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields


@dataclass
class PipelineConfig:
    # -- clock synchronization --
    seg_epsilon_s: int = 40          # swipe-group separation threshold
    pulse_width_s: int = 20          # positive pulse width (< seg_epsilon_s / 4)
    resample_s: int = 10             # coarse scan resolution (<= pulse_width_s / 2)
    tau_max_s: int = 3600            # offset search half-range
    eta: float = 0.5                 # acceptance support level

    # -- stop-record repair --
    min_support: int = 5             # samples needed to fit a travel-time model
    start_window_s: int = 1200       # departure-time conditioning half-window
    trip_time_tolerance: float = 0.1  # relative trip-time conditioning window
    condition: str = "theta2"        # theta0|theta1|theta2|theta3
    dwell_default_s: int = 30        # dwell for synthesized stop events

    # -- journey reconstruction --
    transfer_radius_downtown_m: float = 500.0
    transfer_radius_suburb_m: float = 700.0
    alight_walk_radius_m: float = 700.0   # continuous-inference walk limit
    max_missed_buses: int = 3
    walk_speed_mps: float = 1.2
    day_similarity_eps: float = 0.7
    equivalence_radius_m: float = 300.0
    last_trip_far_km: float = 10.0        # next-day reference distance test
    last_trip_cutoff_s: int = 30600       # 08:30 as seconds of day
    max_day_gap: int = 2
    capacity_per_vehicle: int = 30

    # -- chain mining --
    chain_closure_m: float = 500.0
    cluster_radius_m: float = 700.0
    link_radius_m: float = 700.0
    prune_fraction: float = 0.03
    overlay_days: int = 2
    corridor_coverage: float = 0.85
    dbscan_eps: float = 0.08
    dbscan_min_pts: int = 20
    day_window_start_h: int = 8          # daytime dwell window 08-19
    day_window_end_h: int = 19
    night_window_start_h: int = 17       # nighttime dwell window 17-07
    night_window_end_h: int = 7

    # -- route choice --
    walk_access_m: float = 350.0
    speed_regular_kmh: float = 20.0
    speed_express_kmh: float = 30.0
    board_dwell_s: float = 30.0
    min_swipes: int = 30
    min_r2: float = 0.5
    mnl_max_iter: int = 2000
    mnl_tol: float = 1e-8
    max_transfers_enumerated: int = 1

    # -- route design --
    metric_dwell_s: float = 45.0
    headway_lo_min: float = 2.0
    headway_hi_min: float = 20.0
    swarm_size: int = 30
    pso_iters: int = 200
    pso_c1: float = 1.4961
    pso_c2: float = 1.4961
    omega_hi: float = 0.9
    omega_lo: float = 0.1
    omega_decay_frac: float = 0.8
    ridership_floor: float = 1500.0
    efficiency_floor: float = 0.75
    demand_scale: float = 1.0            # scales the ridership floor for desk-scale cities
    service_hours: float = 17.0
    cost_per_km: float = 5.0
    cost_per_min: float = 1.2

    # -- execution --
    threads: int = 1
    seed: int = 7

    def __post_init__(self):
        if self.pulse_width_s * 2 > self.seg_epsilon_s:
            raise ValueError("pulse width must stay within half the segment threshold")
        if self.resample_s > self.pulse_width_s / 2:
            raise ValueError("resample interval above half the pulse width loses information")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")
        if self.condition not in ("theta0", "theta1", "theta2", "theta3"):
            raise ValueError(f"unknown condition {self.condition!r}")
        if not self.headway_lo_min < self.headway_hi_min:
            raise ValueError("headway bounds inverted")
        if not 10 <= self.swarm_size <= 50:
            raise ValueError("swarm size outside [10, 50]")

    def hash(self) -> str:
        parts = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "PipelineConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(kwargs)
        return PipelineConfig(**values)


def _coerce(raw: str, target_type):
    if target_type is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return target_type(raw.strip())


def load_config(path) -> PipelineConfig:
    known = {f.name: f.type for f in fields(PipelineConfig)}
    types = {f.name: type(getattr(PipelineConfig(), f.name)) for f in fields(PipelineConfig)}
    overrides = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            overrides[key] = _coerce(raw, types[key])
    return PipelineConfig(**overrides)
