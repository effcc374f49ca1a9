"""CNN architectures as data, with per-segment compute and memory costs."""

import logging
import os
from collections.abc import Callable
from enum import Enum
from typing import Any

from pydantic import BaseModel, Field, conint, model_validator, validate_call

from private_placement.core.util import read_document, resolve_path

log = logging.getLogger(__name__)

# Default memory word length in bits.
DEFAULT_WORD_BITS = 4


class LayerKind(str, Enum):
    """Kinds of layers."""

    CONV = "Conv"
    ACTIVATION = "Activation"
    MAX_POOL = "MaxPool"
    FULLY_CONNECTED = "FullyConnected"


# Layers that operate on each feature map independently.
ELEMENT_WISE = (LayerKind.ACTIVATION, LayerKind.MAX_POOL)


class LayerSpec(BaseModel, frozen=True):
    """A single layer of a CNN.

    Index 0 is reserved for the virtual input layer that exposes the image channels as feature maps.
    """

    index: conint(ge=0)
    kind: LayerKind
    name: str | None = None

    # Spatial side length of the filters, Conv only.
    filter_size: conint(ge=0) = 0

    # Number of feature maps produced. Always 1 for fully connected layers.
    out_maps: conint(ge=1) = 1

    # Spatial side length of each produced feature map.
    out_spatial: conint(ge=0) = 0

    # Number of neurons, fully connected layers only.
    neurons: conint(ge=0) = 0

    # Stored weights per segment. Derived from the architecture when not given explicitly.
    weights_per_segment: conint(ge=0) | None = None

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == LayerKind.FULLY_CONNECTED:
            if self.out_maps != 1:
                raise ValueError(f"Layer {self.index}: fully connected layers must have out_maps=1.")
            if self.neurons < 1:
                raise ValueError(f"Layer {self.index}: fully connected layers need neurons >= 1.")
        elif self.kind == LayerKind.CONV:
            if self.filter_size < 1 or self.out_spatial < 1:
                raise ValueError(f"Layer {self.index}: conv layers need filter_size >= 1 and out_spatial >= 1.")
        elif self.out_spatial < 1:
            raise ValueError(f"Layer {self.index}: {self.kind.value} layers need out_spatial >= 1.")
        return self

    @property
    def label(self) -> str:
        return self.name or f"{self.kind.value.lower()}{self.index}"

    @property
    def output_size(self) -> int:
        """Flattened output size: neurons for fully connected layers, P·o² otherwise."""
        if self.kind == LayerKind.FULLY_CONNECTED:
            return self.neurons
        return self.out_maps * self.out_spatial**2


def _derive_weights(layers: list[dict], input_channels: int, input_spatial: int) -> list[dict]:
    """Fill in weights_per_segment where missing.

    A conv segment stores one filter, S² weights for each of the P_{l-1} input maps, plus a bias: S²·P_{l-1}+1. A fully
    connected segment stores the weights for its share of the inputs, and layers without multiplications store nothing.
    """
    prev = {"kind": None, "out_maps": input_channels, "out_spatial": input_spatial, "neurons": 0}
    result = []
    for raw in layers:
        d = dict(raw)
        kind = LayerKind(d["kind"])
        if d.get("weights_per_segment") is None:
            if kind == LayerKind.CONV:
                d["weights_per_segment"] = d.get("filter_size", 0) ** 2 * prev["out_maps"] + 1
            elif kind == LayerKind.FULLY_CONNECTED:
                d["weights_per_segment"] = _inputs_per_segment(prev) * d.get("neurons", 0)
            else:
                d["weights_per_segment"] = 0
        result.append(d)
        prev = {
            "kind": kind,
            "out_maps": d.get("out_maps", 1),
            "out_spatial": d.get("out_spatial", 0),
            "neurons": d.get("neurons", 0),
        }
    return result


def _inputs_per_segment(prev: dict) -> int:
    if prev["kind"] == LayerKind.FULLY_CONNECTED:
        return prev["neurons"]
    return prev["out_spatial"] ** 2


class CnnSpec(BaseModel, frozen=True):
    """A CNN described layer by layer."""

    name: str
    dataset: str
    input_channels: conint(ge=1)
    input_spatial: conint(ge=1)
    layers: tuple[LayerSpec, ...] = Field(min_length=1)

    @model_validator(mode="before")
    @classmethod
    def _fill_layers(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "layers" not in data:
            return data
        layers = [
            layer.model_dump() if isinstance(layer, LayerSpec) else dict(layer) for layer in data["layers"]
        ]
        for i, layer in enumerate(layers, start=1):
            layer.setdefault("index", i)
        try:
            layers = _derive_weights(layers, data.get("input_channels", 1), data.get("input_spatial", 1))
        except (KeyError, ValueError, TypeError):
            # Leave it to field validation to report the problem.
            pass
        return {**data, "layers": layers}

    @model_validator(mode="after")
    def _check_layers(self):
        for i, layer in enumerate(self.layers, start=1):
            if layer.index != i:
                raise ValueError(f"Layer at position {i} has index {layer.index}.")
        if self.layers[-1].kind != LayerKind.FULLY_CONNECTED:
            raise ValueError("The last layer must be fully connected.")
        prev_maps = self.input_channels
        for layer in self.layers:
            if layer.kind in ELEMENT_WISE and layer.out_maps != prev_maps:
                raise ValueError(
                    f"Layer {layer.index}: {layer.kind.value} layers must keep the number of maps ({prev_maps})."
                )
            prev_maps = layer.out_maps
        return self

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer(self, l: int) -> LayerSpec:
        """Return layer l, where 0 is the virtual input layer."""
        if l == 0:
            return LayerSpec(
                index=0,
                kind=LayerKind.ACTIVATION,
                name="input",
                out_maps=self.input_channels,
                out_spatial=self.input_spatial,
                weights_per_segment=0,
            )
        if l < 0 or l > self.num_layers:
            raise ValueError(f"Layer {l} is out of range for {self.name} with {self.num_layers} layers.")
        return self.layers[l - 1]


def conv_segment_cost(layer_k: LayerSpec, layer_k1: LayerSpec) -> int:
    """
    Return the multiplications of one segment of a conv layer.

    Parameters
    ----------
    layer_k : LayerSpec
        The layer producing the segment's input.
    layer_k1 : LayerSpec
        The conv layer consuming it.

    Returns
    -------
    int
        S² · P · o² of layer_k1.
    """
    if layer_k1.kind != LayerKind.CONV:
        raise ValueError(f"Layer {layer_k1.index} is not a conv layer.")
    return layer_k1.filter_size**2 * layer_k1.out_maps * layer_k1.out_spatial**2


def fc_cost(layer_k: LayerSpec, layer_k_prev: LayerSpec) -> int:
    """
    Return the multiplications of a fully connected layer.

    Parameters
    ----------
    layer_k : LayerSpec
        The fully connected layer.
    layer_k_prev : LayerSpec
        The preceding layer. Unless fully connected itself, its flattened output P·o² is the input size.

    Returns
    -------
    int
        Input size times the number of neurons.
    """
    if layer_k.kind != LayerKind.FULLY_CONNECTED:
        raise ValueError(f"Layer {layer_k.index} is not a fully connected layer.")
    return layer_k_prev.output_size * layer_k.neurons


def segment_memory(layer: LayerSpec, p: int = 1, word_bits: int = DEFAULT_WORD_BITS) -> int:
    """
    Return the memory in bits needed to hold the weights of a segment.

    Parameters
    ----------
    layer : LayerSpec
        The layer.
    p : int
        The segment index. All segments of a layer store the same number of weights.
    word_bits : int
        The memory word length in bits.

    Returns
    -------
    int
        W · b.
    """
    if word_bits < 1:
        raise ValueError("Word length must be at least 1 bit.")
    return (layer.weights_per_segment or 0) * word_bits


def segment_count(cnn: CnnSpec, l: int) -> int:
    """Number of segments of layer l, i.e. the number of maps produced by layer l-1."""
    return cnn.layer(l - 1).out_maps


def inputs_per_segment(cnn: CnnSpec, l: int) -> int:
    """Number of input values of one segment of layer l."""
    prev = cnn.layer(l - 1)
    if prev.kind == LayerKind.FULLY_CONNECTED:
        return prev.neurons
    return prev.out_spatial**2


def segment_cost(cnn: CnnSpec, l: int) -> int:
    """
    Return the multiplications of one segment of layer l.

    Fully connected layers spread their cost evenly over their input maps. Layers without multiplications cost 0.
    """
    layer = cnn.layer(l)
    if layer.kind == LayerKind.CONV:
        return conv_segment_cost(cnn.layer(l - 1), layer)
    if layer.kind == LayerKind.FULLY_CONNECTED:
        return inputs_per_segment(cnn, l) * layer.neurons
    return 0


def layer_cost(cnn: CnnSpec, l: int) -> int:
    """Multiplications of all segments of layer l."""
    return segment_count(cnn, l) * segment_cost(cnn, l)


def segment_memory_bits(cnn: CnnSpec, l: int, word_bits: int = DEFAULT_WORD_BITS) -> int:
    """Memory in bits of one segment of layer l."""
    return segment_memory(cnn.layer(l), 1, word_bits)


def first_fc_index(cnn: CnnSpec) -> int | None:
    """Index of the first fully connected layer, or None."""
    for layer in cnn.layers:
        if layer.kind == LayerKind.FULLY_CONNECTED:
            return layer.index
    return None


def _conv(name: str, filter_size: int, out_maps: int, out_spatial: int) -> dict:
    return {
        "kind": LayerKind.CONV,
        "name": name,
        "filter_size": filter_size,
        "out_maps": out_maps,
        "out_spatial": out_spatial,
    }


def _pool(name: str, out_maps: int, out_spatial: int) -> dict:
    return {"kind": LayerKind.MAX_POOL, "name": name, "out_maps": out_maps, "out_spatial": out_spatial}


def _act(name: str, out_maps: int, out_spatial: int) -> dict:
    return {"kind": LayerKind.ACTIVATION, "name": name, "out_maps": out_maps, "out_spatial": out_spatial}


def _fc(name: str, neurons: int) -> dict:
    return {"kind": LayerKind.FULLY_CONNECTED, "name": name, "neurons": neurons}


def _vgg(name: str, dataset: str, convs_per_block: tuple[int, ...], classes: int) -> CnnSpec:
    layers = []
    spatial = 128
    for block, (n, maps) in enumerate(zip(convs_per_block, (64, 128, 256, 512, 512)), start=1):
        for i in range(1, n + 1):
            layers.append(_conv(f"conv{block}{i}", 3, maps, spatial))
        spatial //= 2
        layers.append(_pool(f"pool{block}", maps, spatial))
    layers += [_fc("fc1", 4096), _fc("fc2", 4096), _fc("fc3", classes)]
    return CnnSpec(name=name, dataset=dataset, input_channels=3, input_spatial=128, layers=layers)


def lenet() -> CnnSpec:
    """LeNet on 28x28 gray MNIST images: 2 conv and 3 fully connected layers."""
    return CnnSpec(
        name="LeNet",
        dataset="MNIST",
        input_channels=1,
        input_spatial=28,
        layers=[
            _conv("conv1", 5, 8, 24),
            _pool("pool1", 8, 12),
            _conv("conv2", 5, 8, 8),
            _pool("pool2", 8, 4),
            _fc("fc1", 120),
            _fc("fc2", 84),
            _fc("fc3", 10),
        ],
    )


def cifar_cnn() -> CnnSpec:
    """
    CNN on 32x32 RGB CIFAR images: 6 conv and 2 fully connected layers.

    norm1 stands in for the batch normalization after the first convolution. It has no multiplications and keeps the
    ReLU outputs with SSIM curves on layers 1, 6 and 9.
    """
    return CnnSpec(
        name="CifarCnn",
        dataset="CIFAR",
        input_channels=3,
        input_spatial=32,
        layers=[
            _conv("conv11", 3, 64, 32),
            _act("norm1", 64, 32),
            _conv("conv12", 3, 64, 32),
            _pool("pool1", 64, 16),
            _conv("conv21", 3, 128, 16),
            _conv("conv22", 3, 128, 16),
            _pool("pool2", 128, 8),
            _conv("conv31", 3, 128, 8),
            _conv("conv32", 3, 128, 8),
            _pool("pool3", 128, 4),
            _fc("fc1", 256),
            _fc("fc2", 10),
        ],
    )


def vgg16() -> CnnSpec:
    """VGG16 on 128x128 RGB car images: 13 conv and 3 fully connected layers."""
    return _vgg("VGG16", "CAR", (2, 2, 3, 3, 3), 196)


def vgg19() -> CnnSpec:
    """VGG19 on 128x128 RGB face images: 16 conv and 3 fully connected layers."""
    return _vgg("VGG19", "CELEBA", (2, 2, 4, 4, 4), 40)


# Preset factories by name.
_presets: dict[str, Callable[[], CnnSpec]] = {
    "LeNet": lenet,
    "CifarCnn": cifar_cnn,
    "VGG16": vgg16,
    "VGG19": vgg19,
}


def register_preset(name: str, factory: Callable[[], CnnSpec], force: bool = False) -> None:
    """
    Register a CNN preset.

    Parameters
    ----------
    name : str
        The preset name.
    factory : Callable[[], CnnSpec]
        Function that returns the CNN.
    force : bool
        Whether to replace an existing preset of the same name.
    """
    if name in _presets and not force:
        raise ValueError(f"Preset {name!r} is already registered.")
    _presets[name] = factory


def preset_names() -> list[str]:
    """Names of all registered presets."""
    return list(_presets.keys())


@validate_call
def load_preset(name: str) -> CnnSpec:
    """
    Return the CNN for a preset name.

    Parameters
    ----------
    name : str
        The preset name.

    Returns
    -------
    CnnSpec
        The CNN.

    Raises
    ------
    ValueError
        If no preset of the given name exists.
    """
    factory = _presets.get(name)
    if factory is None:
        raise ValueError(f"Unknown preset {name!r}, available: {', '.join(preset_names())}.")
    return factory()


def load_cnn(path: str | os.PathLike) -> CnnSpec:
    """Load a CNN from a YAML file with schema cnn/v1."""
    doc = read_document(path, "cnn/v1")
    return CnnSpec.model_validate(doc)


def load_model(name_or_path: str | os.PathLike, data_dir: str | os.PathLike | None = None) -> CnnSpec:
    """
    Return a CNN given either a preset name or the path to a model file.

    Raises
    ------
    ValueError
        If the argument names neither a preset nor an existing file.
    """
    if str(name_or_path) in _presets:
        return load_preset(str(name_or_path))
    try:
        path = resolve_path(name_or_path, data_dir)
    except FileNotFoundError as e:
        raise ValueError(
            f"{str(name_or_path)!r} is neither a preset ({', '.join(preset_names())}) nor an existing file."
        ) from e
    log.debug("loading model from %s", path)
    return load_cnn(path)
