from private_placement.core.exact import (
    ExactLimits,
    ExactResult,
    ExactStatus,
    InstanceTooLarge,
    SearchMethod,
    prove_infeasible,
    solve_exact,
)
from private_placement.core.fleet import (
    DeviceClass,
    DeviceKind,
    DeviceSpec,
    Fleet,
    FleetSpec,
    InsufficientResource,
    ResourceLedger,
    SourceSpec,
    build_fleet,
    device_class_names,
    load_fleet,
    load_fleet_preset,
    register_device_class,
)
from private_placement.core.greedy import (
    BatchResult,
    Decision,
    GreedyConfig,
    PlacementOutcome,
    TieBreak,
    place_request,
    run_batch,
    score_candidates,
)
from private_placement.core.instances import Instance, load_instance, random_instance
from private_placement.core.model import (
    CnnSpec,
    LayerKind,
    LayerSpec,
    conv_segment_cost,
    fc_cost,
    layer_cost,
    load_cnn,
    load_model,
    load_preset,
    preset_names,
    register_preset,
    segment_cost,
    segment_count,
    segment_memory,
    segment_memory_bits,
)
from private_placement.core.placement import (
    Assignment,
    Constraint,
    PlacementPlan,
    Request,
    Violation,
    build_plan,
    compute_latency,
    layer_latency,
    output_volume,
    read_plan,
    segment_input_volume,
    shared_bits,
    total_latency,
    validate,
    write_plan,
)
from private_placement.core.privacy import (
    PrivacyPolicy,
    SsimCurve,
    cap_for_layer,
    datasets,
    derive_policy,
    load_curves,
    max_filters,
    policy_for,
    required_helpers,
    split_point,
)
from private_placement.core.simulation import (
    Scenario,
    SimReport,
    SweepAxis,
    SweepSpec,
    find_scenario,
    generate_requests,
    load_scenario,
    load_scenario_preset,
    run_scenario,
    scenario_names,
    sweep,
    write_report,
)

__all__ = [
    "LayerKind",
    "LayerSpec",
    "CnnSpec",
    "conv_segment_cost",
    "fc_cost",
    "segment_memory",
    "segment_count",
    "segment_cost",
    "layer_cost",
    "segment_memory_bits",
    "load_preset",
    "load_cnn",
    "load_model",
    "preset_names",
    "register_preset",
    "SsimCurve",
    "PrivacyPolicy",
    "max_filters",
    "split_point",
    "cap_for_layer",
    "load_curves",
    "datasets",
    "derive_policy",
    "policy_for",
    "required_helpers",
    "DeviceKind",
    "DeviceClass",
    "DeviceSpec",
    "Fleet",
    "FleetSpec",
    "SourceSpec",
    "ResourceLedger",
    "InsufficientResource",
    "build_fleet",
    "load_fleet",
    "load_fleet_preset",
    "register_device_class",
    "device_class_names",
    "Constraint",
    "Request",
    "Violation",
    "Assignment",
    "PlacementPlan",
    "output_volume",
    "segment_input_volume",
    "compute_latency",
    "layer_latency",
    "total_latency",
    "shared_bits",
    "build_plan",
    "validate",
    "write_plan",
    "read_plan",
    "TieBreak",
    "GreedyConfig",
    "Decision",
    "PlacementOutcome",
    "BatchResult",
    "score_candidates",
    "place_request",
    "run_batch",
    "ExactStatus",
    "SearchMethod",
    "ExactLimits",
    "ExactResult",
    "InstanceTooLarge",
    "prove_infeasible",
    "solve_exact",
    "Instance",
    "load_instance",
    "random_instance",
    "Scenario",
    "SimReport",
    "SweepAxis",
    "SweepSpec",
    "generate_requests",
    "run_scenario",
    "sweep",
    "write_report",
    "load_scenario",
    "load_scenario_preset",
    "find_scenario",
    "scenario_names",
]

__version__ = None

try:
    from importlib.metadata import version

    # get version from installed package
    __version__ = version("private-placement")
    del version
except ImportError:
    pass
except Exception:
    # Package not installed.
    pass

if __version__ is None:
    try:
        # if package not installed, get version as set when package built.
        from .version import version
    except Exception:
        # If package not installed and not built, leave __version__ as None
        pass
    else:
        __version__ = version
        del version
