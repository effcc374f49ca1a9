import pytest
from pydantic import ValidationError

from private_placement.core.model import (
    CnnSpec,
    LayerKind,
    LayerSpec,
    conv_segment_cost,
    fc_cost,
    first_fc_index,
    inputs_per_segment,
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
from tests.util import count_multiplications, small_cnn, weights

PRESETS = ["LeNet", "CifarCnn", "VGG16", "VGG19"]


class TestLayerSpec:
    def test_label(self):
        assert LayerSpec(index=3, kind=LayerKind.MAX_POOL, out_maps=4, out_spatial=2).label == "maxpool3"
        assert LayerSpec(index=3, kind=LayerKind.MAX_POOL, name="pool", out_maps=4, out_spatial=2).label == "pool"

    def test_output_size(self):
        assert LayerSpec(index=1, kind=LayerKind.CONV, filter_size=3, out_maps=4, out_spatial=5).output_size == 100
        assert LayerSpec(index=2, kind=LayerKind.FULLY_CONNECTED, neurons=7).output_size == 7

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": LayerKind.FULLY_CONNECTED, "neurons": 0},
            {"kind": LayerKind.FULLY_CONNECTED, "neurons": 10, "out_maps": 2},
            {"kind": LayerKind.CONV, "filter_size": 0, "out_maps": 2, "out_spatial": 2},
            {"kind": LayerKind.CONV, "filter_size": 3, "out_maps": 2, "out_spatial": 0},
            {"kind": LayerKind.MAX_POOL, "out_maps": 2, "out_spatial": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValidationError):
            LayerSpec(index=1, **kwargs)


class TestCnnSpec:
    def test_indices_assigned(self, tiny):
        assert [layer.index for layer in tiny.layers] == [1, 2, 3, 4, 5]
        assert tiny.num_layers == 5

    def test_virtual_input_layer(self, lenet):
        layer = lenet.layer(0)
        assert layer.index == 0
        assert layer.out_maps == 1
        assert layer.out_spatial == 28

    def test_layer_out_of_range(self, lenet):
        with pytest.raises(ValueError):
            lenet.layer(8)
        with pytest.raises(ValueError):
            lenet.layer(-1)

    def test_last_layer_must_be_fully_connected(self):
        with pytest.raises(ValidationError, match="fully connected"):
            CnnSpec(
                name="x",
                dataset="X",
                input_channels=1,
                input_spatial=4,
                layers=[{"kind": "Conv", "filter_size": 3, "out_maps": 2, "out_spatial": 2}],
            )

    def test_element_wise_layers_keep_maps(self):
        with pytest.raises(ValidationError, match="keep the number of maps"):
            CnnSpec(
                name="x",
                dataset="X",
                input_channels=1,
                input_spatial=4,
                layers=[
                    {"kind": "Conv", "filter_size": 3, "out_maps": 2, "out_spatial": 2},
                    {"kind": "MaxPool", "out_maps": 3, "out_spatial": 1},
                    {"kind": "FullyConnected", "neurons": 2},
                ],
            )

    def test_explicit_weights_are_kept(self):
        cnn = CnnSpec(
            name="x",
            dataset="X",
            input_channels=1,
            input_spatial=4,
            layers=[
                {"kind": "Conv", "filter_size": 3, "out_maps": 2, "out_spatial": 2, "weights_per_segment": 99},
                {"kind": "FullyConnected", "neurons": 2},
            ],
        )
        assert cnn.layer(1).weights_per_segment == 99
        assert cnn.layer(2).weights_per_segment == 4 * 2

    def test_layer_counts(self):
        assert load_preset("LeNet").num_layers == 7
        assert load_preset("CifarCnn").num_layers == 12
        assert load_preset("VGG16").num_layers == 21
        assert load_preset("VGG19").num_layers == 24


class TestCosts:
    def test_lenet_conv_segment(self, lenet):
        assert conv_segment_cost(lenet.layer(0), lenet.layer(1)) == 5 * 5 * 8 * 24 * 24
        assert conv_segment_cost(lenet.layer(2), lenet.layer(3)) == 5 * 5 * 8 * 8 * 8

    def test_lenet_fc(self, lenet):
        assert fc_cost(lenet.layer(5), lenet.layer(4)) == 8 * 4 * 4 * 120
        assert fc_cost(lenet.layer(6), lenet.layer(5)) == 120 * 84

    def test_wrong_kind(self, lenet):
        with pytest.raises(ValueError):
            conv_segment_cost(lenet.layer(1), lenet.layer(2))
        with pytest.raises(ValueError):
            fc_cost(lenet.layer(4), lenet.layer(3))

    def test_lenet_memory(self, lenet):
        assert segment_memory(lenet.layer(1)) == (5 * 5 * 1 + 1) * 4
        assert segment_memory(lenet.layer(3)) == (5 * 5 * 8 + 1) * 4
        assert segment_memory(lenet.layer(3), word_bits=8) == (5 * 5 * 8 + 1) * 8
        assert segment_memory(lenet.layer(2)) == 0
        assert segment_memory(lenet.layer(5)) == 16 * 120 * 4

    def test_memory_word_length(self, lenet):
        with pytest.raises(ValueError):
            segment_memory(lenet.layer(1), word_bits=0)

    def test_segments(self, lenet):
        assert [segment_count(lenet, l) for l in range(1, 8)] == [1, 8, 8, 8, 8, 1, 1]
        assert inputs_per_segment(lenet, 5) == 16
        assert inputs_per_segment(lenet, 6) == 120
        assert segment_cost(lenet, 2) == 0
        assert segment_cost(lenet, 5) == 16 * 120

    def test_tiny(self, tiny):
        assert [segment_cost(tiny, l) for l in range(1, 6)] == [288, 0, 8, 12, 6]
        assert [segment_memory_bits(tiny, l) for l in range(1, 6)] == [76, 0, 12, 48, 24]

    @pytest.mark.parametrize("name", PRESETS)
    def test_layer_cost_matches_counted_multiplications(self, name):
        cnn = load_preset(name)
        for l in range(1, cnn.num_layers + 1):
            assert layer_cost(cnn, l) == count_multiplications(cnn, l), cnn.layer(l).label

    @pytest.mark.parametrize("name", PRESETS)
    def test_memory_matches_weights(self, name):
        cnn = load_preset(name)
        for l in range(1, cnn.num_layers + 1):
            assert segment_memory_bits(cnn, l) == weights(cnn, l) * 4, cnn.layer(l).label

    @pytest.mark.parametrize("name, expected", [("LeNet", 5), ("CifarCnn", 11), ("VGG16", 19), ("VGG19", 22)])
    def test_first_fc_index(self, name, expected):
        assert first_fc_index(load_preset(name)) == expected


    def test_conv_weights_follow_input_maps(self, cifar):
        # conv21 reads 64 maps and writes 128.
        assert cifar.layer(5).name == "conv21"
        assert cifar.layer(5).weights_per_segment == 3 * 3 * 64 + 1
        assert segment_memory_bits(cifar, 5) == (3 * 3 * 64 + 1) * 4


class TestPresets:
    def test_cifar_norm_layer(self, cifar):
        norm = cifar.layer(2)
        assert (norm.name, norm.kind) == ("norm1", LayerKind.ACTIVATION)
        assert layer_cost(cifar, 2) == 0
        assert segment_memory_bits(cifar, 2) == 0
        assert [cifar.layer(l).name for l in (1, 6, 9)] == ["conv11", "conv22", "conv32"]

    def test_names(self):
        assert set(PRESETS) <= set(preset_names())

    def test_unknown(self):
        with pytest.raises(ValueError, match="LeNet"):
            load_preset("ResNet")

    def test_presets_are_fresh(self):
        assert load_preset("LeNet") == load_preset("LeNet")

    def test_load_cnn(self, tmp_path):
        path = tmp_path / "tiny.yaml"
        path.write_text(
            "schema: cnn/v1\n"
            "name: Tiny\n"
            "dataset: TINY\n"
            "input_channels: 2\n"
            "input_spatial: 6\n"
            "layers:\n"
            "  - {kind: Conv, name: conv1, filter_size: 3, out_maps: 2, out_spatial: 4}\n"
            "  - {kind: MaxPool, name: pool1, out_maps: 2, out_spatial: 2}\n"
            "  - {kind: Conv, name: conv2, filter_size: 1, out_maps: 2, out_spatial: 2}\n"
            "  - {kind: FullyConnected, name: fc1, neurons: 3}\n"
            "  - {kind: FullyConnected, name: fc2, neurons: 2}\n"
        )
        assert load_cnn(path) == small_cnn()
        assert load_model(str(path)) == small_cnn()

    def test_load_model_by_name(self):
        assert load_model("CifarCnn").dataset == "CIFAR"

    def test_load_model_unknown(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        with pytest.raises(ValueError, match="neither a preset"):
            load_model("nothing.yaml")


@pytest.mark.isolated
def test_register_preset():
    register_preset("Tiny", small_cnn)
    assert "Tiny" in preset_names()
    assert load_model("Tiny") == small_cnn()

    with pytest.raises(ValueError):
        register_preset("Tiny", small_cnn)

    register_preset("Tiny", lambda: small_cnn(name="Tiny2"), force=True)
    assert load_preset("Tiny").name == "Tiny2"
