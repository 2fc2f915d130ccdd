import json
import os

import pytest

from splitwire.catalog import (
    REFERENCE_SPLIT_LAYERS,
    CatalogParseError,
    CatalogValidationError,
    LayerKind,
    UnknownLayerError,
    activation_bytes,
    builtin_mobilenetv2_catalog,
    dump_catalog,
    dumps_catalog,
    load_catalog,
    load_catalog_file,
)


@pytest.fixture(scope="module")
def graph():
    return builtin_mobilenetv2_catalog()


# hand-computed: spatial size after the stride-2 stages, channels = make_divisible(c * 0.35, 8)
@pytest.mark.parametrize("layer,shape,nbytes", [
    ("block_2_expand", (56, 56, 48), 150528),
    ("block_15_project", (7, 7, 56), 2744),
    ("block_16_project_BN", (7, 7, 112), 5488),
    ("Conv1", (112, 112, 16), 200704),
    ("global_average_pooling2d", (1280,), 1280),
])
def test_boundary_sizes(graph, layer, shape, nbytes):
    assert graph.layer(layer).output_shape == shape
    assert activation_bytes(graph, layer) == nbytes


def test_float32_elements_scale_bytes(graph):
    assert activation_bytes(graph, "block_16_project_BN", element_bytes=4) == 4 * 5488
    with pytest.raises(ValueError):
        activation_bytes(graph, "block_16_project_BN", element_bytes=0)


def test_unknown_layer(graph):
    with pytest.raises(UnknownLayerError) as info:
        activation_bytes(graph, "block_99_project")
    assert "block_99_project" in str(info.value)
    assert "block_99_project" not in graph


def test_structure(graph):
    assert len(graph) == 155
    assert graph.layer_names[0] == "Conv1"
    assert graph.layer_names[-1] == "predictions"
    assert graph.index("block_16_project_BN") == graph.index("block_16_project") + 1
    assert graph.layer("block_2_expand").kind is LayerKind.EXPAND
    for name in REFERENCE_SPLIT_LAYERS:
        assert name in graph


def test_part_sizes_for_reference_splits(graph):
    assert graph.layer("block_2_expand").part1_bytes == 752_600
    assert graph.layer("block_16_project_BN").part2_bytes == 9_200_000
    assert graph.layer("Conv1").part1_bytes is None


def test_json_round_trip(graph, tmp_path):
    again = load_catalog(dumps_catalog(graph))
    assert again == graph
    path = tmp_path / "cat.json"
    dump_catalog(graph, path)
    assert load_catalog_file(path) == graph


def test_minimal_document():
    doc = {
        "model_name": "tiny",
        "input_shape": [4],
        "layers": [{"name": "a", "output_shape": [8]}, {"name": "b", "output_shape": [2, 3]}],
    }
    g = load_catalog(json.dumps(doc))
    assert activation_bytes(g, "b") == 6
    assert g.layer("a").kind is LayerKind.OTHER


@pytest.mark.parametrize("text", [
    "{not json",
    "[]",
    json.dumps({"model_name": "m", "input_shape": [1]}),
    json.dumps({"model_name": "m", "input_shape": [1], "layers": [{"name": "a"}]}),
    json.dumps({"model_name": "m", "input_shape": [1], "layers": [{"name": "a", "output_shape": [1], "kind": "lstm"}]}),
])
def test_parse_errors(text):
    with pytest.raises(CatalogParseError):
        load_catalog(text)


@pytest.mark.parametrize("layers", [
    [],
    [{"name": "a", "output_shape": [0]}],
    [{"name": "a", "output_shape": [-3]}],
    [{"name": "a", "output_shape": [2]}, {"name": "a", "output_shape": [2]}],
])
def test_validation_errors(layers):
    with pytest.raises(CatalogValidationError):
        load_catalog({"model_name": "m", "input_shape": [1], "layers": layers})


def test_matches_keras_layer_graph(graph):
    """Independent oracle: the Keras reference implementation of the same network."""
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    tf = pytest.importorskip("tensorflow")
    model = tf.keras.applications.MobileNetV2(
        input_shape=(224, 224, 3), alpha=0.35, weights=None, include_top=True
    )
    keras_layers = [(l.name, tuple(l.output.shape[1:])) for l in model.layers[1:]]
    ours = [(l.name, l.output_shape) for l in graph.layers]
    assert ours == keras_layers
