import numpy as np
import pytest

from private_placement.core.util import (
    DATA_DIR_ENV,
    apportion,
    bytes_to_bits,
    ceil_div,
    min_max,
    parse_mix,
    read_document,
    resolve_path,
)


class TestUtils:
    def test_bytes_to_bits(self):
        assert bytes_to_bits(0) == 0
        assert bytes_to_bits(1) == 8
        assert bytes_to_bits(2**20) == 8 * 2**20

    @pytest.mark.parametrize("a, b, expected", [(0, 1, 0), (1, 1, 1), (7, 2, 4), (8, 2, 4), (64, 8, 8), (65, 8, 9)])
    def test_ceil_div(self, a, b, expected):
        assert ceil_div(a, b) == expected

    def test_ceil_div_rejects_non_positive_divisor(self):
        with pytest.raises(ValueError):
            ceil_div(1, 0)
        with pytest.raises(ValueError):
            ceil_div(1, -2)

    def test_min_max(self):
        np.testing.assert_allclose(min_max(np.array([1.0, 2.0, 3.0])), [0.0, 0.5, 1.0])
        np.testing.assert_allclose(min_max(np.array([5.0, 5.0])), [0.0, 0.0])
        assert min_max(np.array([])).size == 0

    @pytest.mark.parametrize(
        "mix, expected",
        [
            ("70/30", {"STM32H7": 0.7, "RPi3": 0.3}),
            ("50/50", {"STM32H7": 0.5, "RPi3": 0.5}),
            ("0.3/0.7", {"STM32H7": 0.3, "RPi3": 0.7}),
            ("RPi3", {"RPi3": 1.0}),
            ({"LG-Nexus": 25, "RPi3": 75}, {"LG-Nexus": 0.25, "RPi3": 0.75}),
            ({"LG-Nexus": 0.5, "STM32H7": 0.5}, {"LG-Nexus": 0.5, "STM32H7": 0.5}),
        ],
    )
    def test_parse_mix(self, mix, expected):
        result = parse_mix(mix)
        assert list(result) == list(expected)
        for k, v in expected.items():
            assert result[k] == pytest.approx(v)

    @pytest.mark.parametrize("mix", ["", "70/20", "a/b", "1/2/3", {"RPi3": -0.5, "STM32H7": 1.5}, {}])
    def test_parse_mix_invalid(self, mix):
        with pytest.raises(ValueError):
            parse_mix(mix)

    @pytest.mark.parametrize(
        "fractions, count, expected",
        [
            ({"STM32H7": 0.7, "RPi3": 0.3}, 10, {"STM32H7": 7, "RPi3": 3}),
            ({"STM32H7": 0.5, "RPi3": 0.5}, 5, {"STM32H7": 3, "RPi3": 2}),
            ({"a": 1 / 3, "b": 1 / 3, "c": 1 / 3}, 4, {"a": 2, "b": 1, "c": 1}),
            ({"a": 0.7, "b": 0.3}, 0, {"a": 0, "b": 0}),
        ],
    )
    def test_apportion(self, fractions, count, expected):
        result = apportion(fractions, count)
        assert result == expected
        assert sum(result.values()) == count

    def test_apportion_negative(self):
        with pytest.raises(ValueError):
            apportion({"a": 1.0}, -1)


class TestPaths:
    def test_resolve_existing(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        (tmp_path / "fleet.yaml").write_text("helpers: 1\n")
        assert resolve_path("fleet.yaml").name == "fleet.yaml"

    def test_resolve_from_data_dir(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        data = tmp_path / "data"
        data.mkdir()
        (data / "model.yaml").write_text("name: x\n")
        assert resolve_path("model.yaml", data) == data / "model.yaml"

    def test_resolve_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        data = tmp_path / "env"
        data.mkdir()
        (data / "model.yaml").write_text("name: x\n")
        monkeypatch.setenv(DATA_DIR_ENV, str(data))
        assert resolve_path("model.yaml") == data / "model.yaml"

    def test_resolve_missing(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        with pytest.raises(FileNotFoundError):
            resolve_path("missing.yaml", tmp_path)

    def test_read_document(self, tmp_path):
        path = tmp_path / "doc.yaml"
        path.write_text("schema: fleet/v1\nhelpers: 3\n")
        assert read_document(path, "fleet/v1") == {"helpers": 3}

    def test_read_document_without_schema(self, tmp_path):
        path = tmp_path / "doc.yaml"
        path.write_text("helpers: 3\n")
        assert read_document(path, "fleet/v1") == {"helpers": 3}

    def test_read_document_wrong_schema(self, tmp_path):
        path = tmp_path / "doc.yaml"
        path.write_text("schema: cnn/v1\nhelpers: 3\n")
        with pytest.raises(ValueError, match="cnn/v1"):
            read_document(path, "fleet/v1")

    def test_read_document_not_a_mapping(self, tmp_path):
        path = tmp_path / "doc.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ValueError):
            read_document(path, "fleet/v1")
