import logging

import numpy as np
import pytest

from private_placement.core.model import load_preset
from private_placement.core.privacy import (
    PrivacyPolicy,
    SsimCurve,
    cap_for_layer,
    curves_for,
    datasets,
    derive_policy,
    load_curves,
    max_filters,
    pinned_layers,
    policy_for,
    required_helpers,
    split_point,
)
from tests.util import small_cnn


def curve(layer_index: int, entries: dict[int, float], dataset: str = "X") -> SsimCurve:
    return SsimCurve(dataset=dataset, layer_label=f"L{layer_index}", layer_index=layer_index, entries=entries)


class TestCurves:
    def test_embedded_datasets(self):
        assert datasets() == ["CAR", "CELEBA", "CIFAR", "MNIST"]

    def test_embedded_curves(self):
        cifar = curves_for("CIFAR")
        assert [c.layer_label for c in cifar] == ["ReLU11", "ReLU22", "ReLU32"]
        assert [c.layer_index for c in cifar] == [1, 6, 9]
        assert cifar[0].counts == [2, 4, 8, 16, 32, 64]
        assert cifar[0].entries[8] == pytest.approx(0.4)

    def test_missing_measurements_are_dropped(self):
        mnist = curves_for("MNIST")
        assert mnist[0].entries == {4: pytest.approx(0.28), 8: pytest.approx(0.99)}

    def test_unknown_dataset(self):
        with pytest.raises(ValueError, match="CIFAR"):
            curves_for("IMAGENET")

    def test_load_custom_curves(self, tmp_path):
        path = tmp_path / "curves.csv"
        path.write_text(
            "# schema: ssim-curves/v1\n"
            "dataset,layer_label,layer_index,filters,ssim\n"
            "TINY,c1,1,2,0.9\n"
            "TINY,c1,1,1,0.3\n"
            "TINY,c3,3,2,0.2\n"
            "TINY,c3,3,1,\n"
        )
        curves = load_curves(path)
        assert datasets(curves) == ["TINY"]
        assert [c.entries for c in curves_for("TINY", curves)] == [{1: 0.3, 2: 0.9}, {2: 0.2}]


class TestMaxFilters:
    @pytest.mark.parametrize(
        "label, tolerance, expected",
        [("ReLU11", 0.4, 8), ("ReLU22", 0.4, 16), ("ReLU32", 0.4, 32), ("ReLU11", 0.6, 32), ("ReLU11", 0.2, 2)],
    )
    def test_cifar(self, label, tolerance, expected):
        c = next(c for c in curves_for("CIFAR") if c.layer_label == label)
        assert max_filters(c, tolerance) == expected

    def test_epsilon(self):
        c = curve(1, {2: 0.1, 4: 0.405, 8: 0.9})
        assert max_filters(c, 0.4, epsilon=0.0) == 2
        assert max_filters(c, 0.4, epsilon=0.01) == 4

    def test_empty(self):
        with pytest.raises(ValueError):
            max_filters(curve(1, {}), 0.5)


class TestSplitPoint:
    @pytest.mark.parametrize(
        "dataset, num_layers, expected", [("MNIST", 7, 3), ("CIFAR", 12, 9), ("CAR", 21, 9), ("CELEBA", 24, 5)]
    )
    def test_tolerance_08(self, dataset, num_layers, expected):
        assert split_point(curves_for(dataset), 0.8, num_layers=num_layers) == expected

    def test_no_curve_qualifies(self):
        assert split_point(curves_for("CIFAR"), 0.4, num_layers=12) == 13
        assert split_point(curves_for("CIFAR"), 0.4) == 10

    def test_shallowest_qualifies(self):
        assert split_point([curve(2, {4: 0.1}), curve(5, {4: 0.1})], 0.5) == 1

    @pytest.mark.parametrize(
        "dataset, capped", [("MNIST", 2), ("CIFAR", 8), ("CAR", 8), ("CELEBA", 4)]
    )
    def test_capped_prefix(self, dataset, capped):
        cnn = {"MNIST": "LeNet", "CIFAR": "CifarCnn", "CAR": "VGG16", "CELEBA": "VGG19"}[dataset]
        policy = policy_for(load_preset(cnn), 0.8)
        assert [l for l in range(1, 30) if cap_for_layer(policy, l) is not None] == list(range(1, capped + 1))


class TestMonotonicity:
    TOLERANCES = [0.05 * k for k in range(1, 21)]

    @pytest.mark.parametrize("dataset", ["CAR", "CELEBA", "CIFAR", "MNIST"])
    def test_embedded_curves(self, dataset):
        curves = curves_for(dataset)
        for c in curves:
            found = [max_filters(c, t) for t in self.TOLERANCES]
            assert found == sorted(found)
        found = [split_point(curves, t, num_layers=30) for t in self.TOLERANCES]
        assert found == sorted(found, reverse=True)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_curves(self, seed):
        rng = np.random.default_rng(seed)
        layers = sorted(int(l) for l in rng.choice(np.arange(1, 10), size=3, replace=False))
        curves = [curve(l, {n: float(rng.uniform()) for n in (1, 2, 4, 8, 16)}) for l in layers]
        tolerances = sorted(float(t) for t in rng.uniform(0.0, 1.0, 10))
        for c in curves:
            found = [max_filters(c, t, epsilon=0.0) for t in tolerances]
            assert found == sorted(found)
        found = [split_point(curves, t, epsilon=0.0) for t in tolerances]
        assert found == sorted(found, reverse=True)


class TestPolicy:
    def test_cifar_04(self, cifar):
        policy = policy_for(cifar, 0.4)
        assert policy.caps == {1: 8, 6: 16, 9: 32}
        assert policy.split_point == 13
        assert policy.labels == {1: "ReLU11", 6: "ReLU22", 9: "ReLU32"}
        assert policy.infeasible_layers == ()

    def test_mnist_08(self, lenet):
        policy = policy_for(lenet, 0.8)
        assert policy.caps == {1: 4}
        assert policy.split_point == 3

    def test_cap_inheritance(self, cifar):
        policy = policy_for(cifar, 0.4)
        assert [cap_for_layer(policy, l) for l in range(1, 14)] == [8] * 5 + [16] * 3 + [32] * 4 + [None]

    def test_cap_before_first_measured_layer(self):
        policy = PrivacyPolicy(dataset="X", caps={3: 4}, split_point=5)
        assert cap_for_layer(policy, 1) == 4
        assert cap_for_layer(policy, 4) == 4
        assert cap_for_layer(policy, 5) is None

    def test_unbounded(self):
        policy = PrivacyPolicy.unbounded("X")
        assert all(cap_for_layer(policy, l) is None for l in range(1, 10))

    def test_infeasible_layers_warn(self, caplog):
        with caplog.at_level(logging.WARNING, logger="private_placement.core.privacy"):
            policy = derive_policy("CIFAR", 0.2, num_layers=12)
        assert policy.infeasible_layers == (1,)
        assert policy.caps[1] == 2
        assert "ReLU11" in caplog.text

    def test_invalid_tolerance(self):
        with pytest.raises(ValueError):
            derive_policy("CIFAR", 0.0)
        with pytest.raises(ValueError):
            derive_policy("CIFAR", 1.5)

    def test_unknown_dataset_is_unbounded(self, caplog):
        with caplog.at_level(logging.WARNING, logger="private_placement.core.privacy"):
            policy = policy_for(small_cnn(), 0.4)
        assert policy.caps == {}
        assert "TINY" in caplog.text


class TestPinning:
    def test_lenet(self, lenet):
        assert pinned_layers(lenet, policy_for(lenet, 0.8)) == {1, 7}
        assert pinned_layers(lenet, policy_for(lenet, 0.4)) == {1, 5, 7}

    def test_required_helpers(self, lenet, cifar):
        assert required_helpers(policy_for(cifar, 0.4), cifar) == 8
        assert required_helpers(policy_for(lenet, 0.8), lenet) == 2
        assert required_helpers(PrivacyPolicy.unbounded(), lenet) == 1

    def test_required_helpers_tiny(self, tiny):
        assert required_helpers(PrivacyPolicy(dataset="TINY", caps={2: 1}, split_point=4), tiny) == 2
