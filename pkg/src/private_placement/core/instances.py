"""Small placement instances, random or from file, for comparing the greedy and the exact solver."""

import os

import numpy as np
from pydantic import BaseModel, Field, confloat, conint

from private_placement.core.fleet import DeviceKind, DeviceSpec, Fleet, FleetSpec, build_fleet
from private_placement.core.model import CnnSpec, LayerKind, load_model
from private_placement.core.placement import Request
from private_placement.core.privacy import PrivacyPolicy, policy_for
from private_placement.core.util import read_document

SOURCE_ID = "src0"


class Instance(BaseModel, frozen=True):
    """Requests, devices and privacy policies of one period."""

    name: str = "instance"
    requests: tuple[Request, ...]
    fleet: Fleet
    policies: dict[str, PrivacyPolicy] = Field(default_factory=dict)


class InstanceFile(BaseModel, frozen=True):
    """Contents of an instance file."""

    # Preset name, model file, or inline CNN.
    model: str | CnnSpec
    fleet: FleetSpec
    requests: conint(ge=0) = 1
    tolerance: confloat(gt=0.0, le=1.0) | None = None
    epsilon: confloat(ge=0.0) = 0.01

    # Explicit caps, overriding the tolerance.
    caps: dict[conint(ge=1), conint(ge=1)] | None = None
    split_point: conint(ge=1) | None = None


def load_instance(path: str | os.PathLike, data_dir: str | os.PathLike | None = None) -> Instance:
    """
    Load an instance from a YAML file with schema instance/v1.

    All requests come from the first source bound to the model, in turn if there are several.
    """
    spec = InstanceFile.model_validate(read_document(path, "instance/v1"))
    cnn = spec.model if isinstance(spec.model, CnnSpec) else load_model(spec.model, data_dir)
    fleet = build_fleet(spec.fleet)

    sources = [d.id for d in fleet.sources if d.cnn == cnn.name] or [d.id for d in fleet.sources]
    if not sources:
        raise ValueError(f"{str(path)!r} defines no source.")

    if spec.caps is not None or spec.split_point is not None:
        policy = PrivacyPolicy(
            dataset=cnn.dataset,
            caps=spec.caps or {},
            split_point=spec.split_point or cnn.num_layers + 1,
        )
    elif spec.tolerance is not None:
        policy = policy_for(cnn, spec.tolerance, spec.epsilon)
    else:
        policy = PrivacyPolicy.unbounded(cnn.dataset)

    requests = tuple(
        Request(id=f"r{k}", source=sources[k % len(sources)], cnn=cnn) for k in range(spec.requests)
    )
    return Instance(name=str(path), requests=requests, fleet=fleet, policies={cnn.name: policy})


def _random_cnn(rng: np.random.Generator, name: str) -> CnnSpec:
    ch = int(rng.integers(1, 3))
    spatial = int(rng.integers(4, 9))

    layers = []
    maps = int(rng.integers(2, 4))
    size = max(1, spatial - 2)
    layers.append({"kind": LayerKind.CONV, "filter_size": 3, "out_maps": maps, "out_spatial": size})

    for _ in range(int(rng.integers(1, 3))):
        kind = rng.choice(["conv", "act", "pool"])
        if kind == "conv":
            maps = int(rng.integers(2, 4))
            layers.append(
                {"kind": LayerKind.CONV, "filter_size": int(rng.integers(1, 4)), "out_maps": maps, "out_spatial": size}
            )
        elif kind == "act":
            layers.append({"kind": LayerKind.ACTIVATION, "out_maps": maps, "out_spatial": size})
        else:
            size = max(1, size // 2)
            layers.append({"kind": LayerKind.MAX_POOL, "out_maps": maps, "out_spatial": size})

    layers.append({"kind": LayerKind.FULLY_CONNECTED, "neurons": int(rng.integers(4, 9))})
    layers.append({"kind": LayerKind.FULLY_CONNECTED, "neurons": int(rng.integers(2, 4))})

    return CnnSpec(name=name, dataset="random", input_channels=ch, input_spatial=spatial, layers=layers)


def random_instance(seed: int | np.random.Generator, max_requests: int = 2, max_helpers: int = 3) -> Instance:
    """
    Draw a small random instance.

    One source requests a random CNN of four or five layers with two or three maps per layer, up to max_requests times.
    Helpers have random speeds, rates and budgets, scaled so that compute and transmission times are comparable and
    budgets sometimes bind. The privacy policy caps a random prefix of the layers at one or two segments per helper.

    Parameters
    ----------
    seed : int | np.random.Generator
        Seed or random source.
    max_requests : int
        Largest number of requests.
    max_helpers : int
        Largest number of helpers. At least two are drawn.

    Returns
    -------
    Instance
        The instance.
    """
    rng = np.random.default_rng(seed)
    cnn = _random_cnn(rng, "RandomCnn")

    source = DeviceSpec(
        id=SOURCE_ID,
        kind=DeviceKind.SOURCE,
        mem_cap=1_000_000,
        comp_cap=1_000_000,
        bw_cap=int(rng.integers(2_000, 20_000)),
        rate=float(rng.uniform(16.0, 128.0)),
        speed=float(rng.uniform(100.0, 1_000.0)),
        cnn=cnn.name,
    )

    helpers = []
    for k in range(int(rng.integers(2, max_helpers + 1))):
        helpers.append(
            DeviceSpec(
                id=f"h{k:03d}",
                mem_cap=int(rng.integers(200, 4_000)),
                comp_cap=int(rng.integers(1_000, 20_000)),
                bw_cap=int(rng.integers(200, 4_000)),
                rate=float(rng.uniform(16.0, 128.0)),
                speed=float(rng.uniform(100.0, 1_000.0)),
            )
        )

    split = int(rng.integers(2, cnn.num_layers + 2))
    caps = {l: int(rng.integers(1, 3)) for l in range(2, split)}
    policy = PrivacyPolicy(dataset=cnn.dataset, caps=caps, split_point=split)

    requests = tuple(Request(id=f"r{k}", source=SOURCE_ID, cnn=cnn) for k in range(int(rng.integers(1, max_requests + 1))))

    return Instance(
        name=f"random-{seed}" if isinstance(seed, int) else "random",
        requests=requests,
        fleet=Fleet(devices=[source, *helpers]),
        policies={cnn.name: policy},
    )
