"""Per-vehicle clock-offset detection between AFC swipes and AVL stop events.

Both event streams are turned into binary pulse trains (one positive pulse of
width ``t_w`` per event) and the offset is the lag maximizing their
cross-correlation. Multiplication degenerates to AND on binary signals, so the
inner loop runs on packed bitsets (python ints) with popcount.

A coarse pass on max-pooled signals shrinks the search by ``resample**2``
operations; a fine pass at native resolution around the coarse peak recovers
the exact lag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import StopEvent, SwipeRecord


class InsufficientEventsError(ValueError):
    """Raised when a pulse signal carries no events to correlate."""


@dataclass(frozen=True)
class PulseSignal:
    start_ts: int
    resolution: int            # seconds per sample
    n_samples: int
    bits: int                  # packed samples, bit i = sample i
    n_pulses: int              # number of source events

    def __post_init__(self):
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1 second")

    def sample(self, i: int) -> int:
        if i < 0 or i >= self.n_samples:
            return 0
        return (self.bits >> i) & 1

    def to_array(self) -> np.ndarray:
        nbytes = max(1, -(-self.n_samples // 8))
        raw = self.bits.to_bytes(nbytes, "little")
        arr = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
        return arr[: self.n_samples]


@dataclass(frozen=True)
class OffsetResult:
    tau_star: int              # seconds to ADD to swipe timestamps
    cor_peak: float            # matched-event-equivalent correlation peak
    n_cr: int                  # swipe representative count
    n_vr: int                  # AVL event count
    gamma: float               # representative-set sparsity
    accepted: bool
    peak_ratio: float = 0.0    # second-highest / highest correlation (diagnostic)
    ops: int = 0               # inner-loop sample operations spent


def segment_swipes(swipes: Sequence[SwipeRecord], epsilon_s: int = 40) -> list[list[SwipeRecord]]:
    """Split one vehicle-trip's time-ordered swipes into same-stop groups.

    Consecutive swipes closer than ``epsilon_s`` share a group; the first
    element of each group is the stop's representative swipe.
    """
    groups: list[list[SwipeRecord]] = []
    for swipe in swipes:
        if groups and swipe.ts - groups[-1][-1].ts < epsilon_s:
            groups[-1].append(swipe)
        else:
            groups.append([swipe])
    return groups


def representatives(swipes: Sequence[SwipeRecord], epsilon_s: int = 40) -> list[SwipeRecord]:
    return [g[0] for g in segment_swipes(swipes, epsilon_s)]


def build_pulse_signal(
    timestamps: Sequence[int],
    t_w: int = 20,
    resolution: int = 1,
    epsilon_s: int = 40,
    span: tuple[int, int] | None = None,
) -> PulseSignal:
    """Expand event timestamps into a binary pulse train.

    Sample ``i`` covers ``[start + i*res, start + (i+1)*res)`` and is set iff
    that interval intersects some pulse ``[t_k, t_k + t_w)``.

    Args:
        span: optional (start_ts, end_ts) to embed the signal in; defaults to
            the tight envelope of the pulses.
    """
    if t_w * 2 > epsilon_s:
        raise ValueError("pulse width must stay within half the group threshold")
    ts = sorted(int(t) for t in timestamps)
    if span is not None:
        start, end = span
    elif ts:
        start, end = ts[0], ts[-1] + t_w
    else:
        start, end = 0, 0
    n = max(0, -(-(end - start) // resolution))
    arr = np.zeros(n, dtype=np.uint8)
    for t in ts:
        lo = max(0, (t - start) // resolution)
        hi = min(n - 1, (t + t_w - 1 - start) // resolution)
        if hi >= lo:
            arr[lo : hi + 1] = 1
    return PulseSignal(start, resolution, n, _pack(arr), len(ts))


def _pack(arr: np.ndarray) -> int:
    if arr.size == 0:
        return 0
    return int.from_bytes(np.packbits(arr, bitorder="little").tobytes(), "little")


def downsample(signal: PulseSignal, interval_s: int, t_w: int = 20) -> PulseSignal:
    """Max-pool a pulse signal down to ``interval_s`` seconds per sample."""
    if interval_s > t_w / 2:
        raise ValueError("sampling interval above half the pulse width loses pulses")
    if interval_s % signal.resolution != 0:
        raise ValueError("interval must be a multiple of the current resolution")
    factor = interval_s // signal.resolution
    if factor == 1:
        return signal
    n = -(-signal.n_samples // factor)
    arr = signal.to_array()
    pad = (-arr.size) % factor
    if pad:
        arr = np.concatenate([arr, np.zeros(pad, dtype=np.uint8)])
    pooled = arr.reshape(-1, factor).max(axis=1)
    return PulseSignal(signal.start_ts, interval_s, n, _pack(pooled), signal.n_pulses)


def _correlation_scan(
    s_c: PulseSignal, s_v: PulseSignal, tau_values: Sequence[int]
) -> tuple[dict[int, int], int]:
    """Raw correlation sum(S_C(t - tau) & S_V(t)) per tau, plus op count.

    The operation count is the summed overlap length in samples, i.e. what a
    per-sample multiply-accumulate loop would execute.
    """
    res = s_c.resolution
    cors: dict[int, int] = {}
    ops = 0
    base_shift = (s_c.start_ts - s_v.start_ts)
    for tau in tau_values:
        shift_s = base_shift + tau
        if shift_s % res:
            # lag not representable at this resolution
            continue
        d = shift_s // res
        if d >= 0:
            shifted = s_c.bits << d
            lo, hi = d, min(s_v.n_samples, s_c.n_samples + d)
        else:
            shifted = s_c.bits >> (-d)
            lo, hi = 0, min(s_v.n_samples, s_c.n_samples + d)
        overlap = max(0, hi - lo)
        ops += overlap
        cors[tau] = (shifted & s_v.bits).bit_count() if overlap else 0
    return cors, ops


def _pick_peak(cors: dict[int, int]) -> tuple[int, int, float]:
    """Best lag with deterministic tie-break: smallest |tau|, negative first."""
    best_tau, best_cor = None, -1
    for tau in sorted(cors, key=lambda t: (abs(t), t)):
        if cors[tau] > best_cor:
            best_tau, best_cor = tau, cors[tau]
    runner = 0
    for tau, c in cors.items():
        if tau != best_tau and c > runner:
            runner = c
    ratio = runner / best_cor if best_cor > 0 else 0.0
    return best_tau, best_cor, ratio


def cross_correlate_offset(
    s_c: PulseSignal,
    s_v: PulseSignal,
    tau_max: int = 3600,
    t_w: int = 20,
    tau_values: Sequence[int] | None = None,
) -> OffsetResult:
    """Find the lag maximizing the pulse-train cross-correlation.

    Returns the lag to ADD to swipe timestamps so they align with AVL time.
    The raw peak (in samples) is rescaled to a matched-event equivalent,
    ``peak * resolution / t_w``, so it is comparable with the representative
    count for acceptance.
    """
    if s_c.resolution != s_v.resolution:
        raise ValueError("signals must share a resolution")
    if s_c.n_pulses == 0 or s_v.n_pulses == 0:
        raise InsufficientEventsError("insufficient events")
    res = s_c.resolution
    if tau_values is None:
        tau_values = range(-tau_max, tau_max + 1, res)
    cors, ops = _correlation_scan(s_c, s_v, tau_values)
    if not cors:
        raise InsufficientEventsError("no representable lags scanned")
    best_tau, best_cor, ratio = _pick_peak(cors)
    matched = min(best_cor * res / t_w, float(min(s_c.n_pulses, s_v.n_pulses)))
    gamma = sparsity(s_c.n_pulses, s_v.n_pulses) if s_c.n_pulses <= s_v.n_pulses else 0.0
    return OffsetResult(
        tau_star=best_tau,
        cor_peak=matched,
        n_cr=s_c.n_pulses,
        n_vr=s_v.n_pulses,
        gamma=gamma,
        accepted=False,
        peak_ratio=ratio,
        ops=ops,
    )


def correlation_oracle(a: np.ndarray, b: np.ndarray, tau_max: int) -> dict[int, int]:
    """Naive double-loop reference for the correlation scan (aligned starts)."""
    out = {}
    for tau in range(-tau_max, tau_max + 1):
        total = 0
        for t in range(len(b)):
            k = t - tau
            if 0 <= k < len(a):
                total += int(a[k]) * int(b[t])
        out[tau] = total
    return out


def sparsity(n_cr: int, n_vr: int) -> float:
    """Representative-set sparsity: share of stop events with no swipe group."""
    if n_vr <= 0:
        raise ValueError("no AVL events")
    if n_cr > n_vr:
        raise ValueError("representative count exceeds AVL event count")
    return 1.0 - n_cr / n_vr


def accept_offset(result: OffsetResult, eta: float = 0.5) -> bool:
    """Accept iff at least eta * n_cr stop events matched a representative."""
    if not 0 < eta <= 1:
        raise ValueError("eta must be in (0, 1]")
    return result.cor_peak >= eta * result.n_cr


def estimate_offset(
    swipe_reps_ts: Sequence[int],
    avl_arrive_ts: Sequence[int],
    t_w: int = 20,
    resample_s: int = 10,
    tau_max: int = 3600,
    epsilon_s: int = 40,
    fine: bool = True,
) -> OffsetResult:
    """Coarse-to-fine offset search between representative and AVL pulse trains.

    Coarse scan at ``resample_s`` resolution over the full lag range, then a
    1 s refinement within one coarse step of the peak.
    """
    if not avl_arrive_ts:
        raise InsufficientEventsError("insufficient events")
    lo = min(list(swipe_reps_ts) + list(avl_arrive_ts)) - tau_max
    hi = max(list(swipe_reps_ts) + list(avl_arrive_ts)) + t_w + tau_max
    s_c = build_pulse_signal(swipe_reps_ts, t_w, 1, epsilon_s, span=(lo, hi))
    s_v = build_pulse_signal(avl_arrive_ts, t_w, 1, epsilon_s, span=(lo, hi))
    if s_c.n_pulses == 0:
        raise InsufficientEventsError("insufficient events")
    coarse_c = downsample(s_c, resample_s, t_w)
    coarse_v = downsample(s_v, resample_s, t_w)
    coarse = cross_correlate_offset(coarse_c, coarse_v, tau_max, t_w)
    if not fine:
        return coarse
    window = range(coarse.tau_star - resample_s, coarse.tau_star + resample_s + 1)
    refined = cross_correlate_offset(s_c, s_v, tau_max, t_w, tau_values=list(window))
    return OffsetResult(
        tau_star=refined.tau_star,
        cor_peak=refined.cor_peak,
        n_cr=refined.n_cr,
        n_vr=refined.n_vr,
        gamma=refined.gamma,
        accepted=False,
        peak_ratio=coarse.peak_ratio,
        ops=coarse.ops + refined.ops,
    )


def match_swipes_to_stops(
    swipes: Sequence[SwipeRecord],
    events: Sequence[StopEvent],
    tau_star: int,
) -> list[SwipeRecord]:
    """Assign each swipe to the stop whose [arrive, next arrive) window holds
    its corrected timestamp; swipes outside every window stay unmatched."""
    evs = sorted(events, key=lambda e: e.arrive_ts)
    arrivals = [e.arrive_ts for e in evs]
    out = []
    for swipe in swipes:
        ts = swipe.ts + tau_star
        stop = None
        # rightmost arrival <= ts
        lo, hi = 0, len(arrivals)
        while lo < hi:
            mid = (lo + hi) // 2
            if arrivals[mid] <= ts:
                lo = mid + 1
            else:
                hi = mid
        if lo > 0:
            idx = lo - 1
            nxt = arrivals[idx + 1] if idx + 1 < len(arrivals) else None
            if nxt is None or ts < nxt:
                stop = evs[idx].stop
        out.append(SwipeRecord(swipe.card, ts, swipe.vehicle, swipe.route, stop))
    return out


def rectify_and_match(
    swipes: Sequence[SwipeRecord],
    events: Sequence[StopEvent],
    epsilon_s: int = 40,
    t_w: int = 20,
    resample_s: int = 10,
    tau_max: int = 3600,
    eta: float = 0.5,
) -> tuple[list[SwipeRecord], OffsetResult]:
    """Correct one vehicle-day's swipe clock and fill boarding stops.

    When the offset is rejected the swipes are returned unmatched (and
    uncorrected) so the repair stage can pick them up.
    """
    if not swipes or not events:
        raise InsufficientEventsError("both streams must be non-empty")
    ordered = sorted(swipes, key=lambda s: s.ts)
    reps = [r.ts for r in representatives(ordered, epsilon_s)]
    arrivals = sorted({e.arrive_ts for e in events})
    result = estimate_offset(reps, arrivals, t_w, resample_s, tau_max, epsilon_s)
    accepted = accept_offset(result, eta)
    result = OffsetResult(
        tau_star=result.tau_star, cor_peak=result.cor_peak, n_cr=result.n_cr,
        n_vr=result.n_vr, gamma=result.gamma, accepted=accepted,
        peak_ratio=result.peak_ratio, ops=result.ops,
    )
    if not accepted:
        return list(ordered), result
    return match_swipes_to_stops(ordered, events, result.tau_star), result
