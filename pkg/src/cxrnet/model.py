"""Model assembly, parameter/FLOP accounting and weight files."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .convlstm_se import ConvLSTM, SqueezeExcite
from .errors import ArtifactIOError, ConfigError, FormatError, ShapeError
from .modules import ComplexityRow, Flatten, GlobalAvgPool, Linear, ReLU, Sequential
from .regnet import REGNET_X002, RegNetSpec, build_backbone
from .tensor import Tensor, no_grad
from .xten import read_xten, write_xten

PUBLISHED_PARAMS = 140_515_747
PUBLISHED_FLOPS = 1_882_592_528
DESK_INPUT_SIZE = 64
FC_WIDTH = 4096
CONVLSTM_FILTERS = 512
SE_RATIO = 16

FLOP_CONVENTION = ("2 FLOPs per multiply-accumulate (bias adds folded into the accumulate); "
                   "1 FLOP per element for batchnorm, activations, residual adds, pooling and softmax; "
                   "single sample")


@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    kind: str
    out_shape: tuple
    param_names: tuple


class ModelGraph(Sequential):
    """An ordered stack of named layers with a fixed input shape and class count.

    ``forward`` returns logits; :meth:`predict_proba` applies the softmax.
    """

    def __init__(self, name: str, layers: list, input_shape: tuple, classes: int):
        super().__init__(*layers)
        self.name = name
        self.input_shape = tuple(input_shape)
        self.classes = classes
        try:
            out, _ = Sequential.complexity(self, self.input_shape, "")
        except ShapeError as exc:
            raise ConfigError(f"shape inference failed for {name}: {exc}") from exc
        if out != (classes,):
            raise ConfigError(f"{name} produces {out}, expected ({classes},)")

    def complexity(self, in_shape=None, name=""):
        out, rows = Sequential.complexity(self, in_shape or self.input_shape, name)
        rows.append(ComplexityRow("softmax", "softmax", out, 0, 0, out[0]))
        return out, rows

    def descriptors(self) -> list[LayerDescriptor]:
        _, rows = self.complexity()
        by_layer: dict[str, list[str]] = {}
        for pname, *_ in self.named_specs():
            by_layer.setdefault(pname.rsplit(".", 1)[0], []).append(pname)
        return [LayerDescriptor(r.name, r.kind, r.out_shape,
                                tuple(n for k, v in by_layer.items()
                                      if k == r.name or k.startswith(r.name + ".") for n in v))
                for r in rows]

    def param_names(self) -> list[str]:
        return [name for name, *_ in self.named_specs()]

    def predict_proba(self, x: Tensor) -> np.ndarray:
        with no_grad():
            return L.softmax(self.forward(x).data.astype(np.float64))


def _check_input(input_shape) -> tuple:
    c, h, w = (int(v) for v in input_shape)
    if h < 32 or w < 32:
        raise ConfigError(f"input spatial extents must be at least 32, got {h}x{w}")
    return c, h, w


def _resolve_scale(input_shape, scale):
    if scale is None:
        return _check_input(input_shape)
    if scale == "desk":
        return _check_input((input_shape[0], DESK_INPUT_SIZE, DESK_INPUT_SIZE))
    raise ConfigError(f"unknown scale profile {scale!r}")


def assemble_proposed(input_shape=(3, 224, 224), classes: int = 3, scale: str | None = None,
                      spec: RegNetSpec = REGNET_X002) -> ModelGraph:
    """Backbone, ConvLSTM(512, 1x1, one timestep), SE(16), flatten,
    three relu FC layers of 4096 units and the class layer.

    ``scale="desk"`` swaps the input for 64x64 and keeps every width.
    """
    input_shape = _resolve_scale(input_shape, scale)
    backbone = build_backbone(spec, input_shape[0])
    try:
        feat = backbone.out_shape(input_shape)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    flat = CONVLSTM_FILTERS * feat[1] * feat[2]
    layers = [
        ("backbone", backbone),
        ("convlstm", ConvLSTM(backbone.out_channels, CONVLSTM_FILTERS, 1)),
        ("se", SqueezeExcite(CONVLSTM_FILTERS, SE_RATIO)),
        ("flatten", Flatten()),
        ("fc1", Linear(flat, FC_WIDTH)), ("relu1", ReLU()),
        ("fc2", Linear(FC_WIDTH, FC_WIDTH)), ("relu2", ReLU()),
        ("fc3", Linear(FC_WIDTH, FC_WIDTH)), ("relu3", ReLU()),
        ("fc_out", Linear(FC_WIDTH, classes)),
    ]
    return ModelGraph("proposed", layers, input_shape, classes)


def assemble_baseline(input_shape=(3, 224, 224), classes: int = 3, scale: str | None = None,
                      spec: RegNetSpec = REGNET_X002) -> ModelGraph:
    """The plain backbone with global average pooling and one class layer."""
    input_shape = _resolve_scale(input_shape, scale)
    backbone = build_backbone(spec, input_shape[0])
    layers = [("backbone", backbone), ("pool", GlobalAvgPool()),
              ("fc_out", Linear(backbone.out_channels, classes))]
    return ModelGraph("baseline", layers, input_shape, classes)


def assemble(kind: str, input_size: int, classes: int) -> ModelGraph:
    builders = {"proposed": assemble_proposed, "baseline": assemble_baseline}
    if kind not in builders:
        raise ConfigError(f"unknown model {kind!r}; choose proposed or baseline")
    return builders[kind]((3, input_size, input_size), classes)


# -- complexity ----------------------------------------------------------

@dataclass(frozen=True)
class ComplexityReport:
    model: str
    input_shape: tuple
    rows: list[ComplexityRow]
    convention: str

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_trainable(self) -> int:
        return sum(r.trainable for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def row(self, name: str) -> ComplexityRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def params_under(self, prefix: str) -> int:
        return sum(r.params for r in self.rows if r.name == prefix or r.name.startswith(prefix + "."))

    def to_csv(self) -> str:
        buf = io.StringIO()
        shape = "x".join(map(str, self.input_shape))
        dp = self.total_params - PUBLISHED_PARAMS
        buf.write(f"# model: {self.model}\n# input: {shape}\n# convention: {self.convention}\n")
        buf.write(f"# trainable_params: {self.total_trainable}\n")
        buf.write(f"# non_trainable_params: {self.total_params - self.total_trainable}"
                  " (batchnorm running statistics)\n")
        if self.model == "proposed":
            buf.write(f"# reference_published_params: {PUBLISHED_PARAMS} "
                      f"(deviation {dp:+d}, {100 * dp / PUBLISHED_PARAMS:+.4f}%)\n")
            buf.write(f"# reference_published_flops: {PUBLISHED_FLOPS} "
                      "(reference only; its counting convention is not published)\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "kind", "out_shape", "params", "flops"])
        for r in self.rows:
            writer.writerow([r.name, r.kind, "x".join(map(str, r.out_shape)), r.params, r.flops])
        writer.writerow(["TOTAL", "", "", self.total_params, self.total_flops])
        return buf.getvalue()


def count_flops(g: ModelGraph, input_shape=None) -> ComplexityReport:
    input_shape = tuple(input_shape) if input_shape is not None else g.input_shape
    try:
        _, rows = g.complexity(input_shape)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    return ComplexityReport(g.name, input_shape, rows, FLOP_CONVENTION)


def count_params(g: ModelGraph) -> ComplexityReport:
    """Per-layer parameter counts; batchnorm running statistics are included
    in ``params`` and excluded from ``trainable``."""
    report = count_flops(g)
    rows = [ComplexityRow(r.name, r.kind, r.out_shape, r.params, r.trainable, 0) for r in report.rows]
    return ComplexityReport(g.name, g.input_shape, rows, "params only")


# -- weight files --------------------------------------------------------

def save_weights(g: ModelGraph, path) -> None:
    """Write every tensor as ``u16 name length | UTF-8 name | XTEN tensor``."""
    with open(path, "wb") as fh:
        for name, t in g.named_tensors():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_xten(fh, t.data)


def read_weight_file(path) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) < 2:
                raise ArtifactIOError(f"{path}: truncated name length at byte {fh.tell() - len(head)}")
            (length,) = struct.unpack("<H", head)
            raw = fh.read(length)
            if len(raw) != length:
                raise ArtifactIOError(f"{path}: truncated tensor name")
            try:
                name = raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ArtifactIOError(f"{path}: tensor name is not UTF-8") from exc
            if name in entries:
                raise FormatError(f"{path}: duplicate tensor {name!r}")
            entries[name] = read_xten(fh)
    return entries


def load_weights(g: ModelGraph, path) -> ModelGraph:
    entries = read_weight_file(path)
    expected = g.param_names()
    for name in expected:
        if name not in entries:
            raise FormatError(f"{path}: missing tensor {name!r}")
    extra = sorted(set(entries) - set(expected))
    if extra:
        raise FormatError(f"{path}: unexpected tensor {extra[0]!r}")
    for name, spec, owner, local in g.named_specs():
        arr = entries[name]
        if arr.shape != spec.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {spec.shape}")
        owner._values[local] = Tensor(arr.copy(), requires_grad=spec.trainable, name=name)
    return g


def write_report(report: ComplexityReport, path) -> None:
    Path(path).write_text(report.to_csv(), encoding="utf-8")
