"""Layer-level model descriptions and activation sizes.

Only shapes and part sizes are tracked; no weights are stored. The builtin
catalog is MobileNetV2 at width multiplier 0.35 and 224x224 input, listed in
Keras layer order with the batch dimension dropped.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = [
    "CatalogError",
    "CatalogParseError",
    "CatalogValidationError",
    "LayerKind",
    "LayerSpec",
    "ModelGraph",
    "UnknownLayerError",
    "activation_bytes",
    "builtin_mobilenetv2_catalog",
    "dump_catalog",
    "dumps_catalog",
    "load_catalog",
    "load_catalog_file",
    "REFERENCE_SPLIT_LAYERS",
]


class CatalogError(ValueError):
    pass


class CatalogParseError(CatalogError):
    """The document is not a well-formed catalog."""


class CatalogValidationError(CatalogError):
    """The document parsed but violates a graph invariant."""


class UnknownLayerError(KeyError):
    def __init__(self, layer: str, graph: str = ""):
        super().__init__(layer)
        self.layer = layer
        self.graph = graph

    def __str__(self):
        where = f" in {self.graph}" if self.graph else ""
        return f"unknown layer {self.layer!r}{where}"


class LayerKind(str, enum.Enum):
    CONV = "conv"
    EXPAND = "expand"
    PROJECT = "project"
    BN = "bn"
    POOL = "pool"
    CLASSIFIER = "classifier"
    OTHER = "other"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    output_shape: tuple[int, ...]
    kind: LayerKind = LayerKind.OTHER
    part1_bytes: int | None = None
    part2_bytes: int | None = None

    def __post_init__(self):
        shape = tuple(self.output_shape)
        object.__setattr__(self, "output_shape", shape)
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if not self.name:
            raise CatalogValidationError("layer name must be non-empty")
        if not shape:
            raise CatalogValidationError(f"layer {self.name!r}: empty output shape")
        for d in shape:
            if isinstance(d, bool) or not isinstance(d, int) or d < 1:
                raise CatalogValidationError(
                    f"layer {self.name!r}: dims must be positive integers, got {shape}"
                )
        for attr in ("part1_bytes", "part2_bytes"):
            v = getattr(self, attr)
            if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 0):
                raise CatalogValidationError(f"layer {self.name!r}: bad {attr} {v!r}")

    @property
    def elements(self) -> int:
        return math.prod(self.output_shape)


@dataclass(frozen=True)
class ModelGraph:
    model_name: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise CatalogValidationError("graph has no layers")
        if not self.input_shape or any(
            isinstance(d, bool) or not isinstance(d, int) or d < 1 for d in self.input_shape
        ):
            raise CatalogValidationError(f"bad input shape {self.input_shape}")
        index: dict[str, int] = {}
        for i, layer in enumerate(self.layers):
            if layer.name in index:
                raise CatalogValidationError(f"duplicate layer name {layer.name!r}")
            index[layer.name] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.layers)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownLayerError(name, self.model_name) from None

    def layer(self, name: str) -> LayerSpec:
        return self.layers[self.index(name)]

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]


def activation_bytes(graph: ModelGraph, layer: str, element_bytes: int = 1) -> int:
    """Size in bytes of ``layer``'s output tensor (batch of one)."""
    if element_bytes < 1:
        raise ValueError("element_bytes must be >= 1")
    return graph.layer(layer).elements * element_bytes


# --- builtin MobileNetV2 -----------------------------------------------------

# (expansion t, output channels c, repeats n, first stride s)
_INVERTED_RESIDUAL_SETTINGS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]

# Part sizes (D1, D2) measured for the three reference split layers.
_PART_SIZES = {
    "block_2_expand": (752_600, 11_800_000),
    "block_15_project": (2_200_000, 9_700_000),
    "block_16_project_BN": (2_700_000, 9_200_000),
}

REFERENCE_SPLIT_LAYERS = ("block_2_expand", "block_15_project", "block_16_project_BN")


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


def builtin_mobilenetv2_catalog(alpha: float = 0.35, resolution: int = 224) -> ModelGraph:
    layers: list[LayerSpec] = []

    def add(name, shape, kind):
        p1, p2 = _PART_SIZES.get(name, (None, None)) if alpha == 0.35 and resolution == 224 else (None, None)
        layers.append(LayerSpec(name, tuple(shape), LayerKind(kind), p1, p2))

    hw = -(-resolution // 2)
    c = _make_divisible(32 * alpha)
    add("Conv1", (hw, hw, c), "conv")
    add("bn_Conv1", (hw, hw, c), "bn")
    add("Conv1_relu", (hw, hw, c), "other")

    block = 0
    for t, c_out, n, s in _INVERTED_RESIDUAL_SETTINGS:
        out_c = _make_divisible(c_out * alpha)
        for i in range(n):
            stride = s if i == 0 else 1
            prefix = "expanded_conv_" if block == 0 else f"block_{block}_"
            exp_c = c * t
            if block:
                add(prefix + "expand", (hw, hw, exp_c), "expand")
                add(prefix + "expand_BN", (hw, hw, exp_c), "bn")
                add(prefix + "expand_relu", (hw, hw, exp_c), "other")
            if stride == 2:
                # ZeroPadding2D before a strided depthwise conv
                pad = hw + 1 if hw % 2 == 0 else hw + 2
                add(prefix + "pad", (pad, pad, exp_c), "other")
                hw = -(-hw // 2)
            add(prefix + "depthwise", (hw, hw, exp_c), "conv")
            add(prefix + "depthwise_BN", (hw, hw, exp_c), "bn")
            add(prefix + "depthwise_relu", (hw, hw, exp_c), "other")
            add(prefix + "project", (hw, hw, out_c), "project")
            add(prefix + "project_BN", (hw, hw, out_c), "bn")
            if stride == 1 and c == out_c:
                add(prefix + "add", (hw, hw, out_c), "other")
            c = out_c
            block += 1

    last = _make_divisible(1280 * alpha) if alpha > 1.0 else 1280
    add("Conv_1", (hw, hw, last), "conv")
    add("Conv_1_bn", (hw, hw, last), "bn")
    add("out_relu", (hw, hw, last), "other")
    add("global_average_pooling2d", (last,), "pool")
    add("predictions", (1000,), "classifier")

    return ModelGraph(
        model_name=f"mobilenetv2_{alpha:g}_{resolution}",
        input_shape=(resolution, resolution, 3),
        layers=tuple(layers),
    )


# --- JSON documents ------------------------------------------------------------

def _layer_from_doc(doc: Any) -> LayerSpec:
    if not isinstance(doc, dict):
        raise CatalogParseError(f"layer entry must be an object, got {type(doc).__name__}")
    try:
        name = doc["name"]
        shape = doc["output_shape"]
    except KeyError as exc:
        raise CatalogParseError(f"layer entry missing field {exc.args[0]!r}") from None
    if not isinstance(name, str):
        raise CatalogParseError("layer name must be a string")
    if not isinstance(shape, list):
        raise CatalogParseError(f"layer {name!r}: output_shape must be a list")
    kind = doc.get("kind", "other")
    try:
        kind = LayerKind(kind)
    except ValueError:
        raise CatalogParseError(f"layer {name!r}: unknown kind {kind!r}") from None
    return LayerSpec(
        name=name,
        output_shape=tuple(shape),
        kind=kind,
        part1_bytes=doc.get("part1_bytes"),
        part2_bytes=doc.get("part2_bytes"),
    )


def load_catalog(document: str | bytes | dict) -> ModelGraph:
    """Parse a JSON catalog document (text or already-decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise CatalogParseError(f"malformed catalog: {exc}") from None
    if not isinstance(document, dict):
        raise CatalogParseError("catalog must be a JSON object")
    for key in ("model_name", "input_shape", "layers"):
        if key not in document:
            raise CatalogParseError(f"catalog missing field {key!r}")
    if not isinstance(document["layers"], list):
        raise CatalogParseError("'layers' must be a list")
    if not isinstance(document["input_shape"], list):
        raise CatalogParseError("'input_shape' must be a list")
    layers = [_layer_from_doc(entry) for entry in document["layers"]]
    return ModelGraph(str(document["model_name"]), tuple(document["input_shape"]), tuple(layers))


def load_catalog_file(path: str | Path) -> ModelGraph:
    return load_catalog(Path(path).read_text())


def catalog_to_dict(graph: ModelGraph) -> dict:
    layers = []
    for layer in graph.layers:
        entry = {"name": layer.name, "output_shape": list(layer.output_shape), "kind": layer.kind.value}
        if layer.part1_bytes is not None:
            entry["part1_bytes"] = layer.part1_bytes
        if layer.part2_bytes is not None:
            entry["part2_bytes"] = layer.part2_bytes
        layers.append(entry)
    return {"model_name": graph.model_name, "input_shape": list(graph.input_shape), "layers": layers}


def dumps_catalog(graph: ModelGraph, indent: int | None = 2) -> str:
    return json.dumps(catalog_to_dict(graph), indent=indent)


def dump_catalog(graph: ModelGraph, path: str | Path) -> None:
    Path(path).write_text(dumps_catalog(graph) + "\n")

