"""Periodic scheduling of a Poisson request stream, with retries and metrics."""

import logging
import math
import os
from collections import defaultdict
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, confloat, conint, model_validator

from private_placement.core.fleet import Fleet, FleetSpec, ResourceLedger, build_fleet
from private_placement.core.greedy import Decision, GreedyConfig, run_batch
from private_placement.core.model import CnnSpec, load_model
from private_placement.core.placement import Request, validate
from private_placement.core.privacy import DEFAULT_EPSILON, PrivacyPolicy, policy_for
from private_placement.core.util import read_document, resolve_path

log = logging.getLogger(__name__)

SCENARIO_SCHEMA = "scenario/v1"


class SweepAxis(str, Enum):
    FLEET_SIZE = "fleet_size"
    FLEET_MIX = "fleet_mix"
    TOLERANCE = "tolerance"
    CNN = "cnn"


class SweepSpec(BaseModel, frozen=True):
    """Points along one axis at which to run a scenario."""

    axis: SweepAxis
    points: tuple[int | float | str, ...] = Field(min_length=1)


class Scenario(BaseModel, frozen=True):
    """A workload on a fleet."""

    name: str = "scenario"
    fleet: FleetSpec
    request_count: conint(ge=0) = 320

    # Requests per second.
    arrival_rate: confloat(gt=0.0) = 3.0

    tolerance: confloat(gt=0.0, le=1.0) = 0.8
    epsilon: confloat(ge=0.0) = DEFAULT_EPSILON
    seed: int = 0

    # Seconds between scheduling rounds; budgets reset every period.
    period: confloat(gt=0.0) = 1.0

    max_retries: conint(ge=0) = 3
    greedy: GreedyConfig = Field(default_factory=GreedyConfig)

    # Validate every period's placements.
    check_plans: bool = False

    # Keep the greedy decisions of every period.
    trace: bool = False

    # Directory for model files named by the sources.
    data_dir: str | None = None

    # Default sweep of the command line tool. Not used by run_scenario.
    sweep: SweepSpec | None = None


class PeriodStats(BaseModel):
    period: int
    start: float
    scheduled: int = 0
    served: int = 0

    # Attempts rejected in this period, retried later or dropped.
    rejected: int = 0

    # Requests given up in this period.
    dropped: int = 0

    latency: float = 0.0
    shared_bits: int = 0
    wait: float = 0.0


class CnnStats(BaseModel):
    cnn: str
    requests: int = 0
    served: int = 0
    dropped: int = 0
    latency: float = 0.0
    shared_bits: int = 0


class TraceRecord(BaseModel, frozen=True):
    period: int
    attempt: int
    decision: Decision


class SimReport(BaseModel):
    """Metrics of a scenario run."""

    scenario: str
    requests: int
    served: int
    dropped: int

    # Sum over served requests of their layer latencies.
    total_latency: float

    # Bits exchanged between devices for served requests.
    total_shared_bits: int

    # Seconds from arrival to the period boundary at which a request was served.
    total_wait: float

    # Fraction of requests never served.
    rejected_pct: confloat(ge=0.0, le=1.0)

    periods: list[PeriodStats] = Field(default_factory=list)
    per_cnn: list[CnnStats] = Field(default_factory=list)
    trace: list[TraceRecord] = Field(default_factory=list, exclude=True)

    @model_validator(mode="after")
    def _check_totals(self):
        if not math.isclose(self.total_latency, sum(p.latency for p in self.periods), rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError("Total latency must equal the sum over periods.")
        if self.total_shared_bits != sum(p.shared_bits for p in self.periods):
            raise ValueError("Total shared bits must equal the sum over periods.")
        if self.served != sum(p.served for p in self.periods):
            raise ValueError("Served requests must equal the sum over periods.")
        return self


def _models(fleet: Fleet, data_dir: str | None) -> dict[str, CnnSpec]:
    return {d.cnn: load_model(d.cnn, data_dir) for d in fleet.sources}


def generate_requests(scenario: Scenario, fleet: Fleet | None = None) -> list[Request]:
    """
    Draw the request stream of a scenario.

    Inter-arrival times are exponential with the scenario's rate, and each request comes from a source drawn uniformly.

    Parameters
    ----------
    scenario : Scenario
        The scenario.
    fleet : Fleet | None
        The fleet built from the scenario, if already at hand.

    Returns
    -------
    list[Request]
        The requests in arrival order.
    """
    if scenario.request_count == 0:
        return []

    if fleet is None:
        fleet = build_fleet(scenario.fleet, scenario.period)

    sources = fleet.sources
    if not sources:
        raise ValueError("The fleet has no sources to issue requests.")

    models = _models(fleet, scenario.data_dir)
    rng = np.random.default_rng(scenario.seed)
    arrivals = np.cumsum(rng.exponential(1.0 / scenario.arrival_rate, scenario.request_count))
    picks = rng.integers(0, len(sources), scenario.request_count)

    width = len(str(scenario.request_count - 1))
    return [
        Request(id=f"r{k:0{width}d}", source=sources[s].id, cnn=models[sources[s].cnn], arrival=float(t))
        for k, (t, s) in enumerate(zip(arrivals, picks))
    ]


def run_scenario(scenario: Scenario) -> SimReport:
    """
    Run a scenario.

    Requests arriving during a period are scheduled together at its end against fresh budgets. Rejected requests join
    the next period's batch, ahead of new arrivals, until they have been tried max_retries + 1 times.

    Parameters
    ----------
    scenario : Scenario
        The scenario.

    Returns
    -------
    SimReport
        The metrics.
    """
    fleet = build_fleet(scenario.fleet, scenario.period)
    requests = generate_requests(scenario, fleet)
    policies: dict[str, PrivacyPolicy] = {
        cnn.name: policy_for(cnn, scenario.tolerance, scenario.epsilon) for cnn in _models(fleet, scenario.data_dir).values()
    }

    greedy = scenario.greedy
    if scenario.trace and not greedy.trace:
        greedy = greedy.model_copy(update={"trace": True})

    T = scenario.period
    attempts: dict[str, int] = defaultdict(int)
    periods: list[PeriodStats] = []
    per_cnn: dict[str, CnnStats] = {}
    trace: list[TraceRecord] = []

    for r in requests:
        per_cnn.setdefault(r.cnn.name, CnnStats(cnn=r.cnn.name)).requests += 1

    total_latency, total_bits, total_wait, served, dropped = 0.0, 0, 0.0, 0, 0

    retry: list[Request] = []
    pending = 0
    k = 0
    while pending < len(requests) or retry:
        if not retry:
            # Skip idle periods.
            k = max(k, int(math.floor(requests[pending].arrival / T)))

        batch = list(retry)
        while pending < len(requests) and int(math.floor(requests[pending].arrival / T)) <= k:
            batch.append(requests[pending])
            pending += 1

        boundary = (k + 1) * T
        stats = PeriodStats(period=k, start=k * T, scheduled=len(batch))
        result = run_batch(batch, fleet, policies, greedy, ResourceLedger.fresh(fleet))

        if scenario.check_plans:
            served_requests = [r for r, o in zip(batch, result.outcomes) if not o.rejected]
            violations = validate(result.assignment, fleet, policies, served_requests, greedy.word_bits)
            if violations:
                raise RuntimeError(f"Period {k} produced an invalid placement: {violations[0].detail}.")

        retry = []
        for r, outcome in zip(batch, result.outcomes):
            attempts[r.id] += 1
            cnn_stats = per_cnn[r.cnn.name]
            if scenario.trace:
                trace.extend(TraceRecord(period=k, attempt=attempts[r.id], decision=d) for d in outcome.trace)
            if outcome.rejected:
                stats.rejected += 1
                if attempts[r.id] > scenario.max_retries:
                    stats.dropped += 1
                    cnn_stats.dropped += 1
                    log.warning(
                        "request %s dropped after %d attempts: %s",
                        r.id,
                        attempts[r.id],
                        ", ".join(t.value for t in outcome.reasons),
                    )
                else:
                    retry.append(r)
            else:
                stats.served += 1
                stats.latency += outcome.latency
                stats.shared_bits += outcome.shared_bits
                stats.wait += boundary - r.arrival
                cnn_stats.served += 1
                cnn_stats.latency += outcome.latency
                cnn_stats.shared_bits += outcome.shared_bits

        log.info(
            "period %d: %d scheduled, %d served, %d rejected, %d dropped",
            k,
            stats.scheduled,
            stats.served,
            stats.rejected,
            stats.dropped,
        )

        periods.append(stats)
        total_latency += stats.latency
        total_bits += stats.shared_bits
        total_wait += stats.wait
        served += stats.served
        dropped += stats.dropped
        k += 1

    return SimReport(
        scenario=scenario.name,
        requests=len(requests),
        served=served,
        dropped=dropped,
        total_latency=total_latency,
        total_shared_bits=total_bits,
        total_wait=total_wait,
        rejected_pct=dropped / len(requests) if requests else 0.0,
        periods=periods,
        per_cnn=list(per_cnn.values()),
        trace=trace,
    )


def _at(base: Scenario, axis: SweepAxis, point: Any) -> Scenario:
    fleet = base.fleet.model_dump()
    if axis == SweepAxis.FLEET_SIZE:
        fleet["helpers"] = int(point)
    elif axis == SweepAxis.FLEET_MIX:
        fleet["mix"] = point
    elif axis == SweepAxis.CNN:
        fleet["sources"] = [{**s, "cnn": str(point)} for s in fleet["sources"]]
    else:
        return base.model_copy(update={"tolerance": float(point), "name": f"{base.name}@{point}"})
    return base.model_copy(update={"fleet": FleetSpec.model_validate(fleet), "name": f"{base.name}@{point}"})


def sweep(
    base: Scenario,
    axis: SweepAxis | str,
    points: Sequence[Any],
    max_workers: int | None = None,
) -> pd.DataFrame:
    """
    Run a scenario at each point of one axis.

    Parameters
    ----------
    base : Scenario
        The scenario to vary. All points share its seed.
    axis : SweepAxis | str
        One of fleet_size, fleet_mix, tolerance and cnn.
    points : Sequence[Any]
        Values along the axis.
    max_workers : int | None
        Number of processes. Runs sequentially if None or 1.

    Returns
    -------
    pd.DataFrame
        One row per point.
    """
    axis = SweepAxis(axis)
    scenarios = [_at(base, axis, point) for point in points]

    if max_workers is not None and max_workers > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as ex:
            reports = list(ex.map(run_scenario, scenarios))
    else:
        reports = [run_scenario(s) for s in scenarios]

    return pd.DataFrame(
        [
            {
                "axis": axis.value,
                "point": str(point),
                "requests": report.requests,
                "served": report.served,
                "dropped": report.dropped,
                "total_latency": report.total_latency,
                "total_shared_bits": report.total_shared_bits,
                "total_wait": report.total_wait,
                "rejected_pct": report.rejected_pct,
            }
            for point, report in zip(points, reports)
        ]
    )


def report_frame(report: SimReport) -> pd.DataFrame:
    """One row per period and a final totals row."""
    rows = [{**p.model_dump(), "period": str(p.period)} for p in report.periods]
    rows.append(
        {
            "period": "total",
            "start": float("nan"),
            "scheduled": sum(p.scheduled for p in report.periods),
            "served": report.served,
            "rejected": sum(p.rejected for p in report.periods),
            "dropped": report.dropped,
            "latency": report.total_latency,
            "shared_bits": report.total_shared_bits,
            "wait": report.total_wait,
        }
    )
    return pd.DataFrame(rows, columns=list(PeriodStats.model_fields))


def trace_frame(report: SimReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "period": t.period,
                "attempt": t.attempt,
                **t.decision.model_dump(exclude={"failed"}),
                "failed": " ".join(f.value for f in t.decision.failed),
            }
            for t in report.trace
        ]
    )


def write_report(report: SimReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    """
    Write report.csv, summary.json and, if the report has a trace, trace.csv.

    Returns
    -------
    dict[str, Path]
        The written files by name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    files = {"report": out / "report.csv", "summary": out / "summary.json"}
    report_frame(report).to_csv(files["report"], index=False)
    files["summary"].write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")

    if report.trace:
        files["trace"] = out / "trace.csv"
        trace_frame(report).to_csv(files["trace"], index=False)

    return files


def load_scenario(path: str | os.PathLike) -> Scenario:
    """Load a scenario from a YAML file with schema scenario/v1."""
    return Scenario.model_validate(read_document(path, SCENARIO_SCHEMA))


def _embedded_scenarios():
    return resources.files("private_placement").joinpath("data", "scenarios")


def scenario_names() -> list[str]:
    """Names of the bundled scenarios."""
    return sorted(p.name.removesuffix(".yaml") for p in _embedded_scenarios().iterdir() if p.name.endswith(".yaml"))


def load_scenario_preset(name: str) -> Scenario:
    """
    Load a bundled scenario.

    Raises
    ------
    ValueError
        If there is no bundled scenario of that name.
    """
    if name not in scenario_names():
        raise ValueError(f"Unknown scenario {name!r}. Available: {', '.join(scenario_names())}.")
    with resources.as_file(_embedded_scenarios().joinpath(f"{name}.yaml")) as p:
        return load_scenario(p)


def find_scenario(name_or_path: str | os.PathLike, data_dir: str | os.PathLike | None = None) -> Scenario:
    """
    Return a scenario given either the name of a bundled scenario or the path to a scenario file.

    Raises
    ------
    ValueError
        If the argument names neither a bundled scenario nor an existing file.
    """
    if str(name_or_path) in scenario_names():
        return load_scenario_preset(str(name_or_path))
    try:
        path = resolve_path(name_or_path, data_dir)
    except FileNotFoundError as e:
        raise ValueError(
            f"{str(name_or_path)!r} is neither a bundled scenario ({', '.join(scenario_names())}) nor an existing file."
        ) from e
    return load_scenario(path)
