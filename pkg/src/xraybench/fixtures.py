"""Synthetic classifier and image generators for tests and dry runs.

The fixture classifier is a tiny ONNX graph::

    image (1,3,S,S) -> AveragePool(S/4) -> Flatten(48) -> Gemm -> Relu ["embedding"]
                    -> Gemm -> logits (1,2)

Weights are drawn from a seeded RNG, with the class head biased so that
brighter images score as positive. Synthetic "positive" X-rays carry bright
blotches, "negative" ones are darker, which gives the pipeline something
non-trivial to classify.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper
from PIL import Image

from xraybench.runtime import LocalModelConfig

FIXTURE_INPUT = 32
_GRID = 4


def make_classifier_onnx(
    path: str | Path,
    *,
    hidden: int = 32,
    input_size: int = FIXTURE_INPUT,
    seed: int = 0,
    emit_probabilities: bool = False,
) -> Path:
    rng = np.random.default_rng(seed)
    feat = 3 * _GRID * _GRID
    w1 = rng.normal(0.0, 1.0, size=(feat, hidden)).astype(np.float32)
    b1 = np.full(hidden, 0.5, dtype=np.float32)
    # class 0 = positive; its logit grows with the embedding mass driven by brightness
    w1[:, : hidden // 2] = np.abs(w1[:, : hidden // 2])
    w1[:, hidden // 2:] = -np.abs(w1[:, hidden // 2:])
    w2 = np.zeros((hidden, 2), dtype=np.float32)
    w2[: hidden // 2, 0] = 0.8 / hidden
    w2[hidden // 2:, 1] = 0.8 / hidden
    b2 = np.array([-0.5, 0.0], dtype=np.float32)

    k = input_size // _GRID
    nodes = [
        helper.make_node("AveragePool", ["image"], ["pooled"], kernel_shape=[k, k], strides=[k, k]),
        helper.make_node("Flatten", ["pooled"], ["flat"], axis=1),
        helper.make_node("Gemm", ["flat", "w1", "b1"], ["hidden_pre"]),
        helper.make_node("Relu", ["hidden_pre"], ["embedding"]),
        helper.make_node("Gemm", ["embedding", "w2", "b2"], ["logits"]),
    ]
    out_name = "logits"
    if emit_probabilities:
        nodes.append(helper.make_node("Softmax", ["logits"], ["probs"], axis=1))
        out_name = "probs"
    graph = helper.make_graph(
        nodes,
        "fixture_classifier",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, [1, 3, input_size, input_size])],
        [helper.make_tensor_value_info(out_name, TensorProto.FLOAT, [1, 2])],
        initializer=[
            numpy_helper.from_array(w1, "w1"),
            numpy_helper.from_array(b1, "b1"),
            numpy_helper.from_array(w2, "w2"),
            numpy_helper.from_array(b2, "b2"),
        ],
    )
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)], producer_name="xraybench")
    model.ir_version = 8
    onnx.checker.check_model(model)
    path = Path(path)
    onnx.save(model, str(path))
    return path


def fixture_config(path: str | Path, model_id: str = "fixture", *, embedding: bool = True,
                   input_size: int = FIXTURE_INPUT) -> LocalModelConfig:
    size_mb = Path(path).stat().st_size / 1e6
    return LocalModelConfig(
        id=model_id,
        model_path=str(path),
        input_width=input_size,
        input_height=input_size,
        model_size_mb=size_mb,
        mean=(0.5, 0.5, 0.5),
        scale=(2.0, 2.0, 2.0),
        positive_class_index=0,
        embedding_layer="embedding" if embedding else None,
    )


def synthetic_xray(label: str, seed: int, size: int = 64, fmt: str = "PNG") -> bytes:
    """Grayscale chest-film lookalike; positives get bright opacities."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.25 + 0.1 * np.sin(6 * xx) + 0.05 * rng.standard_normal((size, size))
    if label == "positive":
        for _ in range(3):
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            r = rng.uniform(0.1, 0.25)
            base += 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    else:
        base -= 0.05
    img = Image.fromarray((np.clip(base, 0, 1) * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    return buf.getvalue()


def write_synthetic_manifest(
    directory: str | Path,
    n_train_per_class: int = 10,
    n_test_per_class: int = 10,
    *,
    seed: int = 0,
    corrupt: tuple[str, ...] = (),
) -> Path:
    """Write images plus ``manifest.csv`` (sample_id,path,label,split).

    Sample ids listed in ``corrupt`` get garbage bytes instead of an image.
    """
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    n = 0
    for split, per_class in (("train", n_train_per_class), ("test", n_test_per_class)):
        for label in ("positive", "negative"):
            for i in range(per_class):
                sid = f"{split}-{label[:3]}-{i:04d}"
                p = img_dir / f"{sid}.png"
                if sid in corrupt:
                    p.write_bytes(b"not an image")
                else:
                    p.write_bytes(synthetic_xray(label, seed * 100003 + n))
                rows.append((sid, f"images/{p.name}", label, split))
                n += 1
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "path", "label", "split"])
        w.writerows(rows)
    return manifest
