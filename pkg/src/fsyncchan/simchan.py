"""Deterministic virtual-clock simulator of fsync-latency contention.

The receiver in this channel repeatedly times fsync on its own file; a sender
(or any noisy neighbor) sharing the filesystem journal stretches those
latencies while it is busy.  The simulator reproduces that coupling with a
virtual clock so the whole toolchain can be exercised reproducibly at desk
scale: given the same seed and inputs, every run yields the identical trace.

Model
-----
Probe latency is drawn from a truncated Gaussian: `standalone` when the probe
runs alone, `contended` when sender activity or a noise burst is in flight at
the moment the probe's fsync arrives (OverlapRule.ARRIVAL, the default).  The
arrival-instant rule reflects FIFO journal commits: a probe that entered the
journal first is not delayed by work arriving later, while a probe arriving
mid-commit waits for the remainder.  OverlapRule.FULL_INTERVAL instead marks a
probe contended whenever its whole undisturbed interval intersects activity;
it is kept for experiments but systematically smears symbol boundaries.

A Decomposed model splits the commit cost into data writeback, per-block
metadata commit, device flush, and the residual wait for a previous in-flight
commit; an Empirical model uses measured distributions directly.

Each probe advances the clock by its drawn latency plus a fixed per-probe
overhead (default 2 us) covering the mutation syscall and loop bookkeeping.
"""

from __future__ import annotations

import random
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Union

from .core import (
    BitStream,
    ChannelConfig,
    LatencySample,
    LatencyTrace,
    ProbeMode,
    TraceMeta,
)

__all__ = [
    "LatencyDistribution",
    "ModelKind",
    "OverlapRule",
    "ContentionModel",
    "SAME_DISK_PRESET",
    "CROSS_DISK_PRESET",
    "STANDALONE_LATENCY",
    "CONTENDED_FSYNC_PROBE",
    "CROSS_DISK_STANDALONE_FSYNC",
    "CROSS_DISK_CONTENDED_FSYNC_PROBE",
    "default_model",
    "cross_disk_model",
    "decomposed_preset",
    "ActivityTimeline",
    "IDLE",
    "SenderSchedule",
    "NoiseDegree",
    "NoiseProcess",
    "NoiseTimeline",
    "PROBE_OVERHEAD_NS",
    "sim_probe",
    "sim_receive",
    "sim_transmit",
    "SimSource",
    "CommitRecord",
    "journal_serialization_check",
    "SimParams",
    "parse_sim_params",
    "load_sim_params",
]

PROBE_OVERHEAD_NS = 2000


@dataclass(frozen=True)
class LatencyDistribution:
    """Gaussian latency in ns, truncated below at floor_ns.

    Truncation is a clamp, not a redraw, so each draw consumes exactly one
    Gaussian variate; for every preset here the floor sits >7 sigma below the
    mean, where the two schemes are indistinguishable.
    """

    mean_ns: float
    std_ns: float
    floor_ns: int = 1000

    def __post_init__(self):
        if self.mean_ns <= 0:
            raise ValueError("mean_ns must be positive")
        if self.std_ns < 0:
            raise ValueError("std_ns must be nonnegative")
        if self.floor_ns <= 0:
            raise ValueError("floor_ns must be positive")

    def draw(self, rng: random.Random) -> int:
        if self.std_ns == 0:
            return max(self.floor_ns, round(self.mean_ns))
        return max(self.floor_ns, round(rng.gauss(self.mean_ns, self.std_ns)))


# Bundled empirical presets (ns): profiled on a single rig with both parties'
# files in one ext4 journal ("same disk") and with the probe file on a second
# disk whose journal still shares the device queue ("cross disk").  Probe mode
# keys give the standalone cost of that mutation+fsync; the contended tables
# are for an fsync-only probe running against the named competitor operation.
# Recalibrate with `fsyncchan calibrate` for different hardware.
STANDALONE_LATENCY: dict[ProbeMode, tuple[float, float]] = {
    ProbeMode.FSYNC_ONLY: (21390.42, 2478.57),
    ProbeMode.WRITE_FSYNC: (55707.18, 21756.38),
    ProbeMode.FTRUNCATE_FSYNC: (124725.81, 5067.66),
}

CONTENDED_FSYNC_PROBE: dict[ProbeMode, tuple[float, float]] = {
    ProbeMode.FSYNC_ONLY: (43133.73, 2521.81),
    ProbeMode.FTRUNCATE_FSYNC: (47428.24, 21527.58),
    ProbeMode.WRITE_FSYNC: (51112.34, 9088.28),
}

CROSS_DISK_STANDALONE_FSYNC: tuple[float, float] = (21045.51, 316.97)

CROSS_DISK_CONTENDED_FSYNC_PROBE: dict[ProbeMode, tuple[float, float]] = {
    ProbeMode.FSYNC_ONLY: (22253.03, 1611.29),
    ProbeMode.FTRUNCATE_FSYNC: (22456.78, 2770.05),
    ProbeMode.WRITE_FSYNC: (24262.37, 4272.32),
}

# Rounded same-disk fsync-vs-fsync pair used as the out-of-the-box model.
SAME_DISK_PRESET = ((21390.0, 2479.0), (43134.0, 2522.0))
CROSS_DISK_PRESET = (CROSS_DISK_STANDALONE_FSYNC, CROSS_DISK_CONTENDED_FSYNC_PROBE[ProbeMode.FSYNC_ONLY])


class ModelKind(str, Enum):
    EMPIRICAL = "empirical"
    DECOMPOSED = "decomposed"


class OverlapRule(str, Enum):
    """When does sender/noise activity count as contending with a probe?"""

    ARRIVAL = "arrival"  # activity in flight at the probe's fsync arrival
    FULL_INTERVAL = "full-interval"  # activity anywhere in the probe's span


@dataclass(frozen=True)
class ContentionModel:
    """Latency model for one probe stream against one competitor stream."""

    kind: ModelKind
    standalone: LatencyDistribution | None = None
    contended: LatencyDistribution | None = None
    t_data_ns: int = 0
    t_meta_per_block_ns: int = 0
    n_meta_blocks: int = 0
    t_flush_ns: int = 0
    upsilon_prev: LatencyDistribution | None = None

    def __post_init__(self):
        if self.kind is ModelKind.EMPIRICAL:
            if self.standalone is None or self.contended is None:
                raise ValueError("empirical model needs standalone and contended distributions")
            if self.contended.mean_ns <= self.standalone.mean_ns:
                raise ValueError("contended mean must exceed standalone mean")
        else:
            if self.upsilon_prev is None:
                raise ValueError("decomposed model needs an upsilon_prev distribution")
            if min(self.t_data_ns, self.t_meta_per_block_ns, self.n_meta_blocks, self.t_flush_ns) < 0:
                raise ValueError("decomposed components must be nonnegative")
            if self.total_ns <= 0:
                raise ValueError("decomposed commit cost must be positive")

    @classmethod
    def empirical(
        cls,
        standalone: LatencyDistribution,
        contended: LatencyDistribution,
    ) -> "ContentionModel":
        return cls(ModelKind.EMPIRICAL, standalone=standalone, contended=contended)

    @classmethod
    def decomposed(
        cls,
        *,
        t_data_ns: int,
        t_meta_per_block_ns: int,
        n_meta_blocks: int,
        t_flush_ns: int,
        upsilon_prev: LatencyDistribution,
    ) -> "ContentionModel":
        return cls(
            ModelKind.DECOMPOSED,
            t_data_ns=t_data_ns,
            t_meta_per_block_ns=t_meta_per_block_ns,
            n_meta_blocks=n_meta_blocks,
            t_flush_ns=t_flush_ns,
            upsilon_prev=upsilon_prev,
        )

    @property
    def total_ns(self) -> int:
        """Decomposed commit cost without the previous-commit residual."""
        return self.t_data_ns + self.n_meta_blocks * self.t_meta_per_block_ns + self.t_flush_ns

    @property
    def standalone_mean_ns(self) -> float:
        if self.kind is ModelKind.EMPIRICAL:
            return self.standalone.mean_ns
        return float(self.total_ns)

    def contended_stats(self) -> tuple[float, float]:
        if self.kind is ModelKind.EMPIRICAL:
            return (self.contended.mean_ns, self.contended.std_ns)
        return (self.total_ns + self.upsilon_prev.mean_ns, self.upsilon_prev.std_ns)

    def standalone_draw(self, rng: random.Random) -> int:
        if self.kind is ModelKind.EMPIRICAL:
            return self.standalone.draw(rng)
        return self.total_ns

    def contended_draw(self, rng: random.Random) -> int:
        if self.kind is ModelKind.EMPIRICAL:
            return self.contended.draw(rng)
        return self.total_ns + self.upsilon_prev.draw(rng)


def default_model() -> ContentionModel:
    """Same-disk fsync-vs-fsync empirical preset."""
    (sa_mean, sa_std), (co_mean, co_std) = SAME_DISK_PRESET
    return ContentionModel.empirical(
        LatencyDistribution(sa_mean, sa_std),
        LatencyDistribution(co_mean, co_std),
    )


def cross_disk_model(competitor: ProbeMode = ProbeMode.FSYNC_ONLY) -> ContentionModel:
    """Cross-disk preset: contention survives mostly as variance, not mean."""
    sa = LatencyDistribution(*CROSS_DISK_STANDALONE_FSYNC)
    co = LatencyDistribution(*CROSS_DISK_CONTENDED_FSYNC_PROBE[competitor])
    return ContentionModel.empirical(sa, co)


def decomposed_preset() -> ContentionModel:
    """Decomposed split consistent with the same-disk preset totals."""
    return ContentionModel.decomposed(
        t_data_ns=0,
        t_meta_per_block_ns=4000,
        n_meta_blocks=1,
        t_flush_ns=17390,
        upsilon_prev=LatencyDistribution(21744.0, 2522.0),
    )


class ActivityTimeline:
    """Sorted, merged half-open [start, end) windows of competing activity."""

    __slots__ = ("_starts", "_ends")

    def __init__(self, windows: Iterable[tuple[int, int]] = ()):
        merged: list[list[int]] = []
        for start, end in sorted(windows):
            if end <= start:
                raise ValueError(f"empty or inverted window ({start}, {end})")
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        self._starts = [w[0] for w in merged]
        self._ends = [w[1] for w in merged]

    def __len__(self) -> int:
        return len(self._starts)

    def windows(self) -> list[tuple[int, int]]:
        return list(zip(self._starts, self._ends))

    @property
    def duration_ns(self) -> int:
        return self._ends[-1] if self._ends else 0

    def active_at(self, t_ns: int) -> bool:
        i = bisect_right(self._starts, t_ns) - 1
        return i >= 0 and t_ns < self._ends[i]

    def overlaps(self, start_ns: int, end_ns: int) -> bool:
        """True if any window intersects [start_ns, end_ns]."""
        i = bisect_right(self._starts, end_ns) - 1
        return i >= 0 and self._ends[i] > start_ns


IDLE = ActivityTimeline()


class SenderSchedule:
    """Sender activity derived from a bit stream: bit i of value 1 occupies
    [i*ts, (i+1)*ts) with back-to-back mutation+fsync, 0 is idle."""

    __slots__ = ("bits", "ts_us", "_ts_ns", "_raw")

    def __init__(self, bits: BitStream, ts_us: int):
        if ts_us <= 0:
            raise ValueError("ts_us must be positive")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "ts_us", ts_us)
        object.__setattr__(self, "_ts_ns", ts_us * 1000)
        object.__setattr__(self, "_raw", bytes(bits))

    def __setattr__(self, name, value):
        raise AttributeError("SenderSchedule is immutable")

    @property
    def duration_ns(self) -> int:
        return len(self._raw) * self._ts_ns

    def intervals(self) -> list[tuple[int, int]]:
        """Active [start, end) windows with runs of 1-bits merged."""
        out: list[tuple[int, int]] = []
        run_start = None
        for i, b in enumerate(self._raw):
            if b and run_start is None:
                run_start = i
            elif not b and run_start is not None:
                out.append((run_start * self._ts_ns, i * self._ts_ns))
                run_start = None
        if run_start is not None:
            out.append((run_start * self._ts_ns, len(self._raw) * self._ts_ns))
        return out

    def active_at(self, t_ns: int) -> bool:
        if t_ns < 0:
            return False
        i = t_ns // self._ts_ns
        return i < len(self._raw) and self._raw[i] == 1

    def overlaps(self, start_ns: int, end_ns: int) -> bool:
        if end_ns < 0 or not self._raw:
            return False
        first = max(0, start_ns // self._ts_ns)
        last = min(len(self._raw) - 1, end_ns // self._ts_ns)
        for i in range(first, last + 1):
            if self._raw[i]:
                return True
        return False


class NoiseDegree(str, Enum):
    """Background-writer intensity, mapped to expected bursts per second."""

    NONE = "none"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"

    @property
    def bursts_per_second(self) -> float:
        return _DEGREE_RATES[self]


_DEGREE_RATES = {
    NoiseDegree.NONE: 0.0,
    NoiseDegree.LOW: 5.0,
    NoiseDegree.MEDIUM: 50.0,
    NoiseDegree.HIGH: 500.0,
    NoiseDegree.CRITICAL: 5000.0,
}


class NoiseTimeline:
    """Materialized noise bursts as a merged ActivityTimeline."""

    __slots__ = ("_timeline",)

    def __init__(self, bursts: Iterable[tuple[int, int]]):
        self._timeline = ActivityTimeline(bursts)

    def __len__(self) -> int:
        return len(self._timeline)

    def windows(self) -> list[tuple[int, int]]:
        return self._timeline.windows()

    def in_burst_at(self, t_ns: int) -> bool:
        return self._timeline.active_at(t_ns)

    def overlaps(self, start_ns: int, end_ns: int) -> bool:
        return self._timeline.overlaps(start_ns, end_ns)


@dataclass(frozen=True)
class NoiseProcess:
    """Poisson bursts of journal activity from an unrelated neighbor.

    Burst arrivals form a Poisson process at bursts_per_second; each burst
    lasts one draw of burst_len (by default the contended latency, i.e. one
    foreign commit).  Bursts are materialized up front for determinism.
    """

    degree: NoiseDegree
    bursts_per_second: float
    burst_len: LatencyDistribution

    @classmethod
    def from_degree(cls, degree: NoiseDegree, model: ContentionModel) -> "NoiseProcess | None":
        if degree is NoiseDegree.NONE:
            return None
        mean, std = model.contended_stats()
        return cls(degree, degree.bursts_per_second, LatencyDistribution(mean, std))

    def materialize(self, horizon_ns: int, rng: random.Random) -> NoiseTimeline:
        if self.bursts_per_second <= 0 or horizon_ns <= 0:
            return NoiseTimeline(())
        rate_per_ns = self.bursts_per_second / 1e9
        bursts = []
        t = 0.0
        while True:
            t += rng.expovariate(rate_per_ns)
            if t >= horizon_ns:
                break
            start = int(t)
            bursts.append((start, start + self.burst_len.draw(rng)))
        return NoiseTimeline(bursts)


def sim_probe(
    clock_ns: int,
    activity,
    model: ContentionModel,
    noise: NoiseTimeline | None,
    rng: random.Random,
    *,
    overhead_ns: int = PROBE_OVERHEAD_NS,
    rule: OverlapRule = OverlapRule.ARRIVAL,
) -> tuple[LatencySample, int]:
    """Simulate one timed fsync at virtual time clock_ns.

    Returns the sample and the clock advanced past the fsync plus the fixed
    per-probe overhead.  `activity` is anything with active_at/overlaps
    (SenderSchedule, ActivityTimeline).
    """
    if rule is OverlapRule.ARRIVAL:
        contended = activity.active_at(clock_ns) or (noise is not None and noise.in_burst_at(clock_ns))
        latency = model.contended_draw(rng) if contended else model.standalone_draw(rng)
    else:
        tentative = model.standalone_draw(rng)
        end = clock_ns + tentative
        contended = activity.overlaps(clock_ns, end) or (noise is not None and noise.overlaps(clock_ns, end))
        latency = model.contended_draw(rng) if contended else tentative
    return LatencySample(clock_ns, latency), clock_ns + latency + overhead_ns


def _sim_meta(model: ContentionModel, seed: int) -> TraceMeta:
    return TraceMeta(probe_mode=f"sim-{model.kind.value}", session=f"seed={seed}", warmup_samples=0)


def sim_receive(
    activity,
    model: ContentionModel,
    seed: int,
    *,
    duration_ns: int,
    noise: NoiseProcess | None = None,
    overhead_ns: int = PROBE_OVERHEAD_NS,
    rule: OverlapRule = OverlapRule.ARRIVAL,
) -> LatencyTrace:
    """Run the receiver probe loop for duration_ns of virtual time."""
    if duration_ns <= 0:
        raise ValueError("duration_ns must be positive")
    rng = random.Random(seed)
    timeline = noise.materialize(duration_ns, rng) if noise is not None else None
    samples = []
    clock = 0
    while clock < duration_ns:
        sample, clock = sim_probe(
            clock, activity, model, timeline, rng, overhead_ns=overhead_ns, rule=rule
        )
        samples.append(sample)
    return LatencyTrace(samples, _sim_meta(model, seed))


def sim_transmit(
    bits: BitStream,
    cfg: ChannelConfig,
    model: ContentionModel,
    seed: int,
    *,
    noise: NoiseProcess | None = None,
    overhead_ns: int = PROBE_OVERHEAD_NS,
    rule: OverlapRule = OverlapRule.ARRIVAL,
) -> LatencyTrace:
    """Receiver-side trace of a full transmission of `bits` at cfg.ts_us."""
    if len(bits) == 0:
        raise ValueError("bits must not be empty")
    sched = SenderSchedule(bits, cfg.ts_us)
    return sim_receive(
        sched,
        model,
        seed,
        duration_ns=sched.duration_ns,
        noise=noise,
        overhead_ns=overhead_ns,
        rule=rule,
    )


class SimSource:
    """Live simulated sample source for the receiver front end.

    probe_for(duration_us) returns the samples whose fsyncs arrived inside the
    next window of an absolute time grid anchored at the source's start, so
    consecutive windows tile virtual time without drift.  A window fully
    covered by one in-flight probe (possible only when a single latency
    exceeds the window) inherits that probe's latency as a one-sample trace.
    """

    def __init__(
        self,
        activity,
        model: ContentionModel,
        seed: int,
        *,
        noise: NoiseProcess | None = None,
        horizon_ns: int | None = None,
        overhead_ns: int = PROBE_OVERHEAD_NS,
        rule: OverlapRule = OverlapRule.ARRIVAL,
    ):
        self._activity = activity
        self._model = model
        self._rng = random.Random(seed)
        if horizon_ns is None:
            horizon_ns = getattr(activity, "duration_ns", 0) + 100_000_000
        self._noise = noise.materialize(horizon_ns, self._rng) if noise is not None else None
        self._overhead_ns = overhead_ns
        self._rule = rule
        self._meta = _sim_meta(model, seed)
        self._clock = 0
        self._anchor = 0
        self._pending: LatencySample | None = None
        self._last_consumed: LatencySample | None = None

    @property
    def elapsed_us(self) -> float:
        return self._anchor / 1000.0

    def _advance(self) -> LatencySample:
        sample, self._clock = sim_probe(
            self._clock,
            self._activity,
            self._model,
            self._noise,
            self._rng,
            overhead_ns=self._overhead_ns,
            rule=self._rule,
        )
        return sample

    def probe_for(self, duration_us: float) -> LatencyTrace:
        if duration_us <= 0:
            raise ValueError("duration_us must be positive")
        window_end = self._anchor + round(duration_us * 1000)
        samples = []
        if self._pending is not None and self._pending.timestamp_ns < window_end:
            samples.append(self._pending)
            self._pending = None
        while self._pending is None:
            sample = self._advance()
            if sample.timestamp_ns < window_end:
                samples.append(sample)
            else:
                self._pending = sample
        self._anchor = window_end
        if samples:
            self._last_consumed = samples[-1]
        else:
            # the previous probe's fsync spans this whole window; its latency
            # is the only observation the receiver has for it
            samples = [self._last_consumed] if self._last_consumed is not None else [self._pending]
        return LatencyTrace(samples, self._meta)


@dataclass(frozen=True)
class CommitRecord:
    """One journal commit in a serialization check run."""

    index: int
    arrival_ns: int
    upsilon_ns: int  # residual wait for the previous in-flight commit
    service_ns: int  # own commit cost once the journal is free
    latency_ns: int  # upsilon_ns + service_ns
    completion_ns: int


def journal_serialization_check(
    model: ContentionModel,
    rng: random.Random,
    arrivals: Iterable[int] | None = None,
) -> list[CommitRecord]:
    """Feed staggered fsync commits through the single FIFO journal.

    Each commit's latency is its own cost plus a previous-commit residual that
    is at least the analytic remaining time of the in-flight commit (and
    exactly 0 when nothing is in flight).  Completion order always equals
    arrival order.  Default arrivals: a second commit lands mid-way through
    the first.
    """
    if model.kind is not ModelKind.DECOMPOSED:
        raise ValueError("serialization check requires a decomposed model")
    if arrivals is None:
        arrivals = [0, model.total_ns // 2]
    arrivals = sorted(int(a) for a in arrivals)
    if not arrivals:
        raise ValueError("need at least one arrival")
    log: list[CommitRecord] = []
    prev_completion = None
    for i, arrival in enumerate(arrivals):
        service = model.total_ns
        remaining = 0 if prev_completion is None else max(0, prev_completion - arrival)
        if remaining > 0:
            upsilon = max(remaining, model.upsilon_prev.draw(rng))
        else:
            upsilon = 0
        completion = arrival + upsilon + service
        log.append(
            CommitRecord(
                index=i,
                arrival_ns=arrival,
                upsilon_ns=upsilon,
                service_ns=service,
                latency_ns=upsilon + service,
                completion_ns=completion,
            )
        )
        prev_completion = completion
    return log


@dataclass(frozen=True)
class SimParams:
    """Model settings parsed from a key=value params file."""

    standalone_mean_ns: float = SAME_DISK_PRESET[0][0]
    standalone_std_ns: float = SAME_DISK_PRESET[0][1]
    contended_mean_ns: float = SAME_DISK_PRESET[1][0]
    contended_std_ns: float = SAME_DISK_PRESET[1][1]
    noise_degree: NoiseDegree = NoiseDegree.NONE
    seed: int | None = None

    def model(self) -> ContentionModel:
        return ContentionModel.empirical(
            LatencyDistribution(self.standalone_mean_ns, self.standalone_std_ns),
            LatencyDistribution(self.contended_mean_ns, self.contended_std_ns),
        )

    def noise(self, model: ContentionModel | None = None) -> NoiseProcess | None:
        return NoiseProcess.from_degree(self.noise_degree, model or self.model())


_SIM_PARAM_KEYS = {
    "standalone.mean_ns": ("standalone_mean_ns", float),
    "standalone.std_ns": ("standalone_std_ns", float),
    "contended.mean_ns": ("contended_mean_ns", float),
    "contended.std_ns": ("contended_std_ns", float),
    "noise.degree": ("noise_degree", NoiseDegree),
    "seed": ("seed", int),
}


def parse_sim_params(text: str) -> SimParams:
    """Parse `key=value` lines; `#` comments and blank lines are ignored."""
    fields = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {line_no}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SIM_PARAM_KEYS:
            raise ValueError(f"line {line_no}: unknown key {key!r}")
        attr, conv = _SIM_PARAM_KEYS[key]
        try:
            fields[attr] = conv(value)
        except ValueError:
            raise ValueError(f"line {line_no}: bad value {value!r} for {key}") from None
    return SimParams(**fields)


def load_sim_params(path: Union[str, Path]) -> SimParams:
    return parse_sim_params(Path(path).read_text(encoding="utf-8"))
