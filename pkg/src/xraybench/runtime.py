"""Local discriminative classifiers served through ONNX Runtime."""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import onnx
import onnxruntime as ort
from PIL import Image, UnidentifiedImageError

from xraybench.errors import (
    BackendError,
    CapabilityError,
    ConfigError,
    InputFormatError,
    ModelNotFoundError,
)

log = logging.getLogger(__name__)

# Output vectors whose sum is further than this from 1 are treated as logits.
NORMALIZED_TOL = 1e-3
LOCAL_SUM_TOL = 1e-6


@dataclass(frozen=True)
class LocalModelConfig:
    id: str
    model_path: str
    input_width: int
    input_height: int
    model_size_mb: float
    channels: int = 3
    channel_order: str = "RGB"
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    scale: tuple[float, ...] = (1.0, 1.0, 1.0)
    positive_class_index: int = 0
    embedding_layer: str | None = None
    input_name: str | None = None
    output_name: str | None = None

    def __post_init__(self) -> None:
        if self.input_width <= 0 or self.input_height <= 0:
            raise ConfigError(f"{self.id}: input dimensions must be > 0")
        if self.channels not in (1, 3):
            raise ConfigError(f"{self.id}: channels must be 1 or 3")
        if self.channel_order.upper() not in ("RGB", "BGR"):
            raise ConfigError(f"{self.id}: channel_order must be RGB or BGR")
        for name in ("mean", "scale"):
            v = getattr(self, name)
            if len(v) not in (1, self.channels):
                raise ConfigError(f"{self.id}: {name} needs 1 or {self.channels} values")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        if self.positive_class_index < 0:
            raise ConfigError(f"{self.id}: positive_class_index must be >= 0")
        if not self.model_size_mb > 0:
            raise ConfigError(f"{self.id}: model_size_mb must be > 0")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "LocalModelConfig":
        data = dict(data)
        if base_dir is not None and not os.path.isabs(data["model_path"]):
            data["model_path"] = str(Path(base_dir) / data["model_path"])
        for key in ("mean", "scale"):
            if key in data and not isinstance(data[key], (list, tuple)):
                data[key] = (data[key],)
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "model_path": self.model_path,
            "input_width": self.input_width,
            "input_height": self.input_height,
            "model_size_mb": self.model_size_mb,
            "channels": self.channels,
            "channel_order": self.channel_order,
            "mean": list(self.mean),
            "scale": list(self.scale),
            "positive_class_index": self.positive_class_index,
            "embedding_layer": self.embedding_layer,
        }


@dataclass(frozen=True)
class Diagnosis:
    p_positive: float
    p_negative: float

    def __post_init__(self) -> None:
        for name in ("p_positive", "p_negative"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def sum_error(self) -> float:
        return abs(self.p_positive + self.p_negative - 1.0)


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray = field(repr=False)
    embedder_id: str

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise ValueError("embedding must be non-empty and finite")
        if not np.linalg.norm(v) > 0:
            raise ValueError("embedding has zero norm")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class ModelHandle:
    """A loaded, immutable ONNX Runtime session for one model config."""

    def __init__(self, config: LocalModelConfig, session: ort.InferenceSession,
                 input_name: str, output_name: str, output_arity: int,
                 embedding_output: str | None, embedding_dim: int | None):
        self.config = config
        self._session = session
        self.input_name = input_name
        self.output_name = output_name
        self.output_arity = output_arity
        self.embedding_output = embedding_output
        self.embedding_dim = embedding_dim

    @property
    def id(self) -> str:
        return self.config.id

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.config.channels, self.config.input_height, self.config.input_width)

    @property
    def supports_embedding(self) -> bool:
        return self.embedding_output is not None

    def _run(self, names: Sequence[str], tensor: np.ndarray) -> list[np.ndarray]:
        if tuple(tensor.shape) != self.input_shape:
            raise ValueError(f"{self.id}: tensor shape {tensor.shape} != {self.input_shape}")
        batch = np.ascontiguousarray(tensor[np.newaxis, ...], dtype=np.float32)
        try:
            return self._session.run(list(names), {self.input_name: batch})
        except Exception as exc:  # onnxruntime raises its own untyped errors
            raise BackendError(self.id, f"inference failed: {exc}") from exc


def _static_dims(value_info: onnx.ValueInfoProto) -> list[int | None]:
    dims = []
    for d in value_info.type.tensor_type.shape.dim:
        dims.append(d.dim_value if d.HasField("dim_value") else None)
    return dims


def load_model(config: LocalModelConfig) -> ModelHandle:
    path = Path(config.model_path)
    if not path.is_file():
        raise ModelNotFoundError(f"{config.id}: model file not found: {path}")
    on_disk_mb = path.stat().st_size / 1e6
    if abs(on_disk_mb - config.model_size_mb) > 0.01 * on_disk_mb:
        raise ConfigError(
            f"{config.id}: model_size_mb={config.model_size_mb} differs from on-disk "
            f"{on_disk_mb:.4f} MB by more than 1%"
        )
    try:
        model = onnx.load(str(path))
    except Exception as exc:
        raise ConfigError(f"{config.id}: not a valid ONNX graph: {exc}") from exc

    graph = model.graph
    initializers = {i.name for i in graph.initializer}
    inputs = [i for i in graph.input if i.name not in initializers]
    if len(inputs) != 1:
        raise ConfigError(f"{config.id}: expected exactly one graph input, found {len(inputs)}")
    inp = inputs[0]
    if config.input_name and config.input_name != inp.name:
        raise ConfigError(f"{config.id}: graph input is {inp.name!r}, not {config.input_name!r}")
    want = [None, config.channels, config.input_height, config.input_width]
    dims = _static_dims(inp)
    if len(dims) != 4 or any(d is not None and d != w for d, w in zip(dims[1:], want[1:])):
        raise ConfigError(f"{config.id}: graph input shape {dims} does not match config {want}")

    output_name = config.output_name or graph.output[0].name
    if output_name not in {o.name for o in graph.output}:
        raise ConfigError(f"{config.id}: graph has no output {output_name!r}")

    embedding_output = None
    if config.embedding_layer:
        produced = {o for node in graph.node for o in node.output}
        if config.embedding_layer not in produced:
            raise ConfigError(f"{config.id}: no intermediate named {config.embedding_layer!r}")
        if config.embedding_layer not in {o.name for o in graph.output}:
            # expose the intermediate as an extra graph output
            graph.output.append(onnx.ValueInfoProto(name=config.embedding_layer))
        embedding_output = config.embedding_layer

    opts = ort.SessionOptions()
    opts.log_severity_level = 3
    try:
        session = ort.InferenceSession(model.SerializeToString(), opts,
                                       providers=["CPUExecutionProvider"])
    except Exception as exc:
        raise ConfigError(f"{config.id}: onnxruntime rejected the graph: {exc}") from exc

    probe = np.zeros((1, *want[1:]), dtype=np.float32)
    names = [output_name] + ([embedding_output] if embedding_output else [])
    try:
        outs = session.run(names, {inp.name: probe})
    except Exception as exc:
        raise ConfigError(f"{config.id}: probe inference failed: {exc}") from exc
    arity = int(np.asarray(outs[0]).reshape(-1).shape[0])
    if not 0 <= config.positive_class_index < arity:
        raise ConfigError(
            f"{config.id}: positive_class_index {config.positive_class_index} out of range for arity {arity}"
        )
    emb_dim = int(np.asarray(outs[1]).size) if embedding_output else None
    return ModelHandle(config, session, inp.name, output_name, arity, embedding_output, emb_dim)


def decode_image(image_bytes: bytes) -> Image.Image:
    if not image_bytes:
        raise InputFormatError("empty image bytes")
    try:
        img = Image.open(io.BytesIO(image_bytes))
        fmt = img.format
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise InputFormatError(f"cannot decode image: {exc}") from exc
    if fmt not in ("PNG", "JPEG"):
        raise InputFormatError(f"unsupported image format {fmt}")
    return img


def preprocess(image_bytes: bytes, config: LocalModelConfig) -> np.ndarray:
    """Decode, resize (bilinear) and normalize to a (C, H, W) float32 tensor.

    Grayscale inputs are replicated across channels. Normalization is
    ``(pixel / 255 - mean) * scale`` per channel.
    """
    img = decode_image(image_bytes)
    mode = "L" if config.channels == 1 else "RGB"
    if img.mode != mode:
        img = img.convert(mode)
    size = (config.input_width, config.input_height)
    if img.size != size:
        img = img.resize(size, Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if config.channel_order.upper() == "BGR":
        arr = arr[:, :, ::-1]
    mean = np.asarray(config.mean, dtype=np.float32)
    scale = np.asarray(config.scale, dtype=np.float32)
    arr = (arr - mean) * scale
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32)


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def to_probabilities(raw: np.ndarray) -> np.ndarray:
    """Pass through outputs that already look like a distribution, else softmax."""
    v = np.asarray(raw, dtype=np.float64).reshape(-1)
    if np.all(v >= 0) and np.all(v <= 1) and abs(v.sum() - 1.0) <= NORMALIZED_TOL:
        return v
    return softmax(v)


def diagnosis_from_output(raw: np.ndarray, positive_index: int) -> Diagnosis:
    probs = to_probabilities(raw)
    p_pos = float(probs[positive_index])
    p_neg = float(np.delete(probs, positive_index).sum())
    return Diagnosis(min(max(p_pos, 0.0), 1.0), min(max(p_neg, 0.0), 1.0))


def classify(handle: ModelHandle, tensor: np.ndarray) -> Diagnosis:
    (out,) = handle._run([handle.output_name], tensor)
    return diagnosis_from_output(out, handle.config.positive_class_index)


def embed(handle: ModelHandle, tensor: np.ndarray) -> EmbeddingVector:
    if not handle.supports_embedding:
        raise CapabilityError(f"{handle.id}: no embedding_layer configured")
    (out,) = handle._run([handle.embedding_output], tensor)
    return EmbeddingVector(np.asarray(out).reshape(-1), embedder_id=handle.id)
