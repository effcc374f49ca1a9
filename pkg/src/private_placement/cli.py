"""Command line entry point."""

import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
import pandas as pd

from private_placement.core.exact import ExactLimits, ExactStatus, InstanceTooLarge, solve_exact
from private_placement.core.fleet import DeviceKind, FleetSpec, SourceSpec, build_fleet
from private_placement.core.greedy import GreedyConfig, run_batch
from private_placement.core.instances import Instance, load_instance, random_instance
from private_placement.core.model import load_model, load_preset, preset_names
from private_placement.core.placement import Request, build_plan, write_plan
from private_placement.core.privacy import (
    DEFAULT_EPSILON,
    PrivacyPolicy,
    cap_for_layer,
    curves_for,
    derive_policy,
    load_curves,
)
from private_placement.core.simulation import SweepAxis, find_scenario, run_scenario, sweep, write_report
from private_placement.core.util import DATA_DIR_ENV, read_document, resolve_path

log = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_LIMIT = 3


class Infeasible(click.ClickException):
    """No valid placement exists or a request was rejected."""

    exit_code = EXIT_INFEASIBLE


class LimitExceeded(click.ClickException):
    """An instance or search exceeds the configured limits."""

    exit_code = EXIT_LIMIT


class PlacementGroup(click.Group):
    """Maps errors to the exit codes of all subcommands."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            return super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.UsageError as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(e.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except (FileNotFoundError, ValueError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_USAGE)


def _greedy_config(
    base: GreedyConfig | None, alpha: float | None, beta: float | None, seed: int | None
) -> GreedyConfig:
    # A single weight given implies the other.
    values = (base or GreedyConfig()).model_dump()
    if alpha is not None:
        values["alpha"] = alpha
        if beta is None:
            values["beta"] = 1.0 - alpha
    if beta is not None:
        values["beta"] = beta
        if alpha is None:
            values["alpha"] = 1.0 - beta
    if seed is not None:
        values["seed"] = seed
    return GreedyConfig.model_validate(values)


def _format_reasons(reasons) -> str:
    return ", ".join(r.value for r in reasons) or "unknown"


@click.group(cls=PlacementGroup)
@click.option("-v", "--verbose", count=True, help="Log at INFO, or at DEBUG if given twice.")
@click.option(
    "--data-dir",
    envvar=DATA_DIR_ENV,
    type=click.Path(file_okay=False),
    default=None,
    help="Directory for input files not found relative to the working directory.",
)
@click.pass_context
def cli(ctx: click.Context, verbose: int, data_dir: str | None):
    """Privacy-aware placement of CNN inference on IoT devices."""
    if verbose:
        logging.basicConfig(level=logging.DEBUG if verbose > 1 else logging.INFO)
    ctx.obj = {"data_dir": data_dir}


@cli.command()
@click.argument("model")
@click.argument("fleet")
@click.option("--tolerance", type=click.FloatRange(0.0, 1.0, min_open=True), default=None, help="Tolerated SSIM.")
@click.option("--epsilon", type=click.FloatRange(min=0.0), default=DEFAULT_EPSILON, show_default=True)
@click.option("--exact", is_flag=True, help="Solve to optimality instead of placing greedily.")
@click.option("--requests", type=click.IntRange(min=1), default=1, show_default=True, help="Number of requests.")
@click.option("--alpha", type=click.FloatRange(0.0, 1.0), default=None, help="Weight of the latency term.")
@click.option("--beta", type=click.FloatRange(0.0, 1.0), default=None, help="Weight of the bandwidth term.")
@click.option("--seed", type=int, default=None, help="Seed for random tie-breaking.")
@click.option("--period", type=click.FloatRange(min=0.0, min_open=True), default=None, help="Period in seconds.")
@click.option("--out", type=click.Path(dir_okay=False), default="plan.csv", show_default=True, help="Plan file.")
@click.pass_obj
def solve(obj, model, fleet, tolerance, epsilon, exact, requests, alpha, beta, seed, period, out):
    """
    Place requests of MODEL on the devices of FLEET.

    MODEL is a preset name or a model file, FLEET a fleet file. A fleet without sources gets one RPi3 source for MODEL.
    """
    data_dir = obj["data_dir"]
    cnn = load_model(model, data_dir)

    spec = FleetSpec.model_validate(read_document(resolve_path(fleet, data_dir), "fleet/v1"))
    if not spec.sources and not any(d.kind == DeviceKind.SOURCE for d in spec.devices):
        spec = spec.model_copy(update={"sources": (SourceSpec(cnn=cnn.name),)})
    devices = build_fleet(spec, period)

    sources = [d.id for d in devices.sources if d.cnn == cnn.name] or [d.id for d in devices.sources]
    batch = [Request(id=f"r{k}", source=sources[k % len(sources)], cnn=cnn) for k in range(requests)]

    if tolerance is None:
        policy = PrivacyPolicy.unbounded(cnn.dataset)
    elif cnn.dataset in {c.dataset for c in load_curves()}:
        policy = derive_policy(cnn.dataset, tolerance, epsilon, cnn.num_layers)
    else:
        raise click.UsageError(f"No SSIM curves for dataset {cnn.dataset!r} of {cnn.name}.")

    if exact:
        try:
            result = solve_exact(batch, devices, policy)
        except InstanceTooLarge as e:
            raise LimitExceeded(str(e)) from None
        if result.status == ExactStatus.INFEASIBLE:
            raise Infeasible(result.certificate or "no valid placement exists")
        if result.status == ExactStatus.BUDGET_EXCEEDED:
            raise LimitExceeded(f"search budget exhausted after {result.nodes} nodes")
        assignment = result.assignment
    else:
        config = _greedy_config(None, alpha, beta, seed)
        result = run_batch(batch, devices, policy, config)
        rejected = [o for o in result.outcomes if o.rejected]
        if rejected:
            raise Infeasible(
                "; ".join(f"request {o.request} rejected: {_format_reasons(o.reasons)}" for o in rejected)
            )
        assignment = result.assignment

    plan = build_plan(assignment, batch, devices)
    write_plan(assignment, out)

    click.echo(f"objective: {plan.objective:.6g} s")
    for (rid, l), latency in sorted(plan.per_layer_latency.items()):
        click.echo(f"  {rid} layer {l}: {latency:.6g} s")
    click.echo(f"shared bits: {plan.shared_bits}")
    click.echo(f"plan: {out}")


@cli.command()
@click.argument("scenario")
@click.option("--tolerance", type=click.FloatRange(0.0, 1.0, min_open=True), default=None, help="Tolerated SSIM.")
@click.option("--epsilon", type=click.FloatRange(min=0.0), default=None)
@click.option("--seed", type=int, default=None, help="Seed of the arrival process.")
@click.option("--period", type=click.FloatRange(min=0.0, min_open=True), default=None, help="Period in seconds.")
@click.option("--max-retries", type=click.IntRange(min=0), default=None)
@click.option("--alpha", type=click.FloatRange(0.0, 1.0), default=None, help="Weight of the latency term.")
@click.option("--beta", type=click.FloatRange(0.0, 1.0), default=None, help="Weight of the bandwidth term.")
@click.option("--trace", is_flag=True, help="Write the greedy decisions to trace.csv.")
@click.option("--sweep", "axis", type=click.Choice([a.value for a in SweepAxis]), default=None, help="Axis to sweep.")
@click.option("--points", default=None, help="Comma-separated values along the swept axis.")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Processes for sweeps.")
@click.option("--out", type=click.Path(file_okay=False), default="report", show_default=True, help="Output directory.")
@click.pass_obj
def simulate(obj, scenario, tolerance, epsilon, seed, period, max_retries, alpha, beta, trace, axis, points, workers, out):
    """
    Run SCENARIO, a bundled scenario name or a scenario file, and write report.csv and summary.json.

    With --sweep, or if the scenario has a sweep, run every point and write sweep.csv instead.
    """
    data_dir = obj["data_dir"]
    base = find_scenario(scenario, data_dir)

    overrides = {
        k: v
        for k, v in {
            "tolerance": tolerance,
            "epsilon": epsilon,
            "seed": seed,
            "period": period,
            "max_retries": max_retries,
        }.items()
        if v is not None
    }
    if trace:
        overrides["trace"] = True
    if data_dir is not None and base.data_dir is None:
        overrides["data_dir"] = data_dir
    overrides["greedy"] = _greedy_config(base.greedy, alpha, beta, None)

    base = type(base).model_validate({**base.model_dump(), **overrides})

    out_dir = Path(out)
    if axis is None and base.sweep is not None:
        axis = base.sweep.axis.value
    if axis is None and points is not None:
        raise click.UsageError("--points requires --sweep.")
    if axis is not None:
        if points:
            values = [p.strip() for p in points.split(",") if p.strip()]
        elif base.sweep is not None and base.sweep.axis.value == axis:
            values = [str(p) for p in base.sweep.points]
        else:
            raise click.UsageError("--sweep requires --points.")
        frame = sweep(base, axis, values, max_workers=workers)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "sweep.csv", index=False)
        click.echo(frame.to_string(index=False))
        return

    report = run_scenario(base)
    files = write_report(report, out_dir)
    click.echo(
        f"{report.served} of {report.requests} requests served, {report.dropped} rejected "
        f"({report.rejected_pct:.1%}), latency {report.total_latency:.6g} s, shared bits {report.total_shared_bits}"
    )
    for path in files.values():
        click.echo(f"wrote {path}")


@cli.command()
@click.argument("dataset")
@click.option("--tolerance", type=click.FloatRange(0.0, 1.0, min_open=True), required=True, help="Tolerated SSIM.")
@click.option("--epsilon", type=click.FloatRange(min=0.0), default=DEFAULT_EPSILON, show_default=True)
@click.option("--curves", type=click.Path(dir_okay=False), default=None, help="SSIM curves file.")
@click.pass_obj
def privacy(obj, dataset, tolerance, epsilon, curves):
    """Show the per-layer caps and the split point of DATASET, or of the dataset of a preset CNN."""
    table = load_curves(resolve_path(curves, obj["data_dir"]) if curves else None)
    num_layers = None
    if dataset in preset_names():
        cnn = load_preset(dataset)
        dataset, num_layers = cnn.dataset, cnn.num_layers

    policy = derive_policy(dataset, tolerance, epsilon, num_layers, table)
    rows = [
        {
            "layer_label": c.layer_label,
            "layer_index": c.layer_index,
            "filters": cap_for_layer(policy, c.layer_index) or "-",
        }
        for c in curves_for(dataset, table)
    ]
    click.echo(pd.DataFrame(rows).to_string(index=False))
    click.echo(f"split point: {policy.split_point}")


def _compare_one(instance: Instance, limits: ExactLimits) -> dict:
    start = time.perf_counter()
    greedy = run_batch(instance.requests, instance.fleet, instance.policies)
    greedy_seconds = time.perf_counter() - start
    exact = solve_exact(instance.requests, instance.fleet, instance.policies, limits)

    greedy_objective = None if greedy.rejections else greedy.total_latency
    gap = None
    if greedy_objective is not None and exact.status == ExactStatus.OPTIMAL:
        gap = greedy_objective - exact.objective

    return {
        "instance": instance.name,
        "greedy": "rejected" if greedy.rejections else "placed",
        "greedy_objective": greedy_objective,
        "exact": exact.status.value,
        "exact_objective": exact.objective,
        "gap": gap,
        "greedy_seconds": greedy_seconds,
        "exact_seconds": exact.seconds,
        "nodes": exact.nodes,
    }


@cli.command()
@click.argument("instance", required=False)
@click.option("--random", "count", type=click.IntRange(min=1), default=None, help="Compare on N random instances.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the random instances.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV file for the comparison table.")
@click.pass_obj
def compare(obj, instance, count, seed, out):
    """Compare the greedy with the exact solver on INSTANCE or on random instances."""
    if (instance is None) == (count is None):
        raise click.UsageError("Give either an instance file or --random N.")

    limits = ExactLimits()
    if instance is not None:
        inst = load_instance(resolve_path(instance, obj["data_dir"]), obj["data_dir"])
        try:
            rows = [_compare_one(inst, limits)]
        except InstanceTooLarge as e:
            raise LimitExceeded(str(e)) from None
    else:
        rng = np.random.default_rng(seed)
        rows = [
            _compare_one(random_instance(rng).model_copy(update={"name": f"random-{seed}-{k}"}), limits)
            for k in range(count)
        ]

    frame = pd.DataFrame(rows)
    click.echo(frame.to_string(index=False))

    if count is not None:
        gaps = frame["gap"].dropna().astype(float)
        if len(gaps):
            click.echo(
                f"compared {len(gaps)} of {len(frame)}: "
                f"gap min {gaps.min():.6g}, mean {gaps.mean():.6g}, max {gaps.max():.6g}"
            )
        else:
            click.echo(f"compared 0 of {len(frame)}")

    if out is not None:
        frame.drop(columns=["greedy_seconds", "exact_seconds"]).to_csv(out, index=False)

    if instance is not None and rows[0]["greedy"] == "rejected" and rows[0]["exact"] == ExactStatus.INFEASIBLE.value:
        raise Infeasible("greedy rejected and no valid placement exists")
