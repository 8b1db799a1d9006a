import io
import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from xraybench.errors import CapabilityError, ConfigError, InputFormatError, ModelNotFoundError
from xraybench.fixtures import fixture_config, make_classifier_onnx, synthetic_xray
from xraybench.runtime import (
    Diagnosis,
    EmbeddingVector,
    LocalModelConfig,
    classify,
    diagnosis_from_output,
    embed,
    load_model,
    preprocess,
    to_probabilities,
)


def png(arr: np.ndarray, mode: str = "L") -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def test_load_reports_arity_and_embedding(handle):
    assert handle.output_arity == 2
    assert handle.supports_embedding
    assert handle.embedding_dim == 32
    assert handle.input_shape == (3, 32, 32)


def test_positive_index_out_of_range(model_config):
    with pytest.raises(ConfigError, match="arity 2"):
        load_model(replace(model_config, positive_class_index=5))


def test_missing_model_file(model_config, tmp_path):
    with pytest.raises(ModelNotFoundError):
        load_model(replace(model_config, model_path=str(tmp_path / "absent.onnx")))


def test_size_mismatch_rejected(model_config):
    with pytest.raises(ConfigError, match="1%"):
        load_model(replace(model_config, model_size_mb=model_config.model_size_mb * 1.05))


def test_input_shape_mismatch(model_config):
    with pytest.raises(ConfigError, match="shape"):
        load_model(replace(model_config, input_width=64, input_height=64))


def test_unknown_embedding_layer(model_config):
    with pytest.raises(ConfigError):
        load_model(replace(model_config, embedding_layer="nope"))


def test_not_an_onnx_file(tmp_path):
    p = tmp_path / "junk.onnx"
    p.write_bytes(b"\x00garbage" * 100)
    cfg = LocalModelConfig("junk", str(p), 32, 32, p.stat().st_size / 1e6)
    with pytest.raises(ConfigError):
        load_model(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        LocalModelConfig("x", "m.onnx", 0, 32, 1.0)
    with pytest.raises(ConfigError):
        LocalModelConfig("x", "m.onnx", 32, 32, 1.0, mean=(0.1, 0.2))
    with pytest.raises(ConfigError):
        LocalModelConfig("x", "m.onnx", 32, 32, 0)


def test_from_dict_resolves_relative(tmp_path):
    cfg = LocalModelConfig.from_dict(
        {"id": "m", "model_path": "m.onnx", "input_width": 8, "input_height": 8, "model_size_mb": 1,
         "mean": 0.5, "scale": [2, 2, 2]}, base_dir=tmp_path)
    assert cfg.model_path == str(tmp_path / "m.onnx")
    assert cfg.mean == (0.5,)
    with pytest.raises(ConfigError):
        LocalModelConfig.from_dict({"id": "m", "model_path": "m", "input_width": 8, "input_height": 8,
                                    "model_size_mb": 1, "bogus": 1})


def test_preprocess_large_grayscale():
    cfg = LocalModelConfig("m", "m.onnx", 224, 224, 1.0)
    img = png(np.random.default_rng(1).integers(0, 256, (1024, 1024)))
    t = preprocess(img, cfg)
    assert t.shape == (3, 224, 224) and t.dtype == np.float32
    assert np.array_equal(t[0], t[1]) and np.array_equal(t[1], t[2])


def test_preprocess_normalization_zero_image(model_config):
    t = preprocess(png(np.zeros((32, 32))), model_config)
    assert np.all(t == -1.0)


def test_preprocess_identity_resize():
    arr = np.random.default_rng(2).integers(0, 256, (16, 16, 3))
    cfg = LocalModelConfig("m", "m.onnx", 16, 16, 1.0)
    t = preprocess(png(arr, "RGB"), cfg)
    np.testing.assert_allclose(t, arr.transpose(2, 0, 1) / 255.0, rtol=0, atol=1e-7)


def test_preprocess_bgr_swaps_channels():
    arr = np.zeros((8, 8, 3))
    arr[..., 0] = 255
    rgb = preprocess(png(arr, "RGB"), LocalModelConfig("m", "m.onnx", 8, 8, 1.0))
    bgr = preprocess(png(arr, "RGB"), LocalModelConfig("m", "m.onnx", 8, 8, 1.0, channel_order="BGR"))
    assert rgb[0].max() == 1.0 and bgr[2].max() == 1.0 and bgr[0].max() == 0.0


def test_preprocess_jpeg_accepted(model_config):
    t = preprocess(synthetic_xray("positive", 0, fmt="JPEG"), model_config)
    assert t.shape == (3, 32, 32)


@pytest.mark.parametrize("data", [b"", b"\x89PNG\r\n\x1a\n truncated", b"GIF89a....", b"hello"])
def test_undecodable_inputs(data, model_config):
    with pytest.raises(InputFormatError):
        preprocess(data, model_config)


def test_gif_rejected(model_config):
    buf = io.BytesIO()
    Image.new("L", (8, 8)).save(buf, format="GIF")
    with pytest.raises(InputFormatError, match="unsupported"):
        preprocess(buf.getvalue(), model_config)


def test_classify_deterministic(handle, model_config):
    t = preprocess(synthetic_xray("positive", 3), model_config)
    a, b = classify(handle, t), classify(handle, t)
    assert a == b
    assert a.sum_error() < 1e-6


def test_fixture_separates_classes(handle, model_config):
    pos = [classify(handle, preprocess(synthetic_xray("positive", s), model_config)).p_positive for s in range(10)]
    neg = [classify(handle, preprocess(synthetic_xray("negative", s), model_config)).p_positive for s in range(10)]
    assert min(pos) > max(neg)


def test_classify_rejects_wrong_shape(handle):
    with pytest.raises(ValueError):
        classify(handle, np.zeros((3, 8, 8), dtype=np.float32))


def test_softmax_equal_logits():
    d = diagnosis_from_output(np.array([0.0, 0.0]), 0)
    assert d == Diagnosis(0.5, 0.5)


def test_softmax_ln9():
    d = diagnosis_from_output(np.array([math.log(9), 0.0]), 0)
    oracle = math.exp(math.log(9)) / (math.exp(math.log(9)) + math.exp(0))
    assert d.p_positive == pytest.approx(oracle, abs=1e-9)
    assert d.p_positive == pytest.approx(0.9, abs=1e-9)


def test_probabilities_pass_through():
    d = diagnosis_from_output(np.array([0.92, 0.08]), 0)
    assert d.p_positive == pytest.approx(0.92, abs=1e-12)
    assert d.p_negative == pytest.approx(0.08, abs=1e-12)


def test_positive_index_selects_column():
    d = diagnosis_from_output(np.array([0.08, 0.92]), 1)
    assert d.p_positive == pytest.approx(0.92)


def test_three_class_output_collapses_negative():
    d = diagnosis_from_output(np.array([0.2, 0.3, 0.5]), 2)
    assert d.p_positive == pytest.approx(0.5) and d.p_negative == pytest.approx(0.5)


def test_softmax_model_matches_logits_model(tmp_path, handle, model_config):
    p = make_classifier_onnx(tmp_path / "probs.onnx", emit_probabilities=True)
    h2 = load_model(fixture_config(p))
    t = preprocess(synthetic_xray("negative", 1), model_config)
    assert classify(h2, t).p_positive == pytest.approx(classify(handle, t).p_positive, abs=1e-6)


@settings(max_examples=200)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5))
def test_diagnosis_invariants(logits, idx):
    idx = idx % len(logits)
    d = diagnosis_from_output(np.array(logits), idx)
    assert 0 <= d.p_positive <= 1 and 0 <= d.p_negative <= 1
    assert d.sum_error() <= 1e-6
    assert np.isclose(to_probabilities(np.array(logits)).sum(), 1.0)


def test_embedding_dim_follows_layer(tmp_path):
    p = make_classifier_onnx(tmp_path / "wide.onnx", hidden=1024)
    h = load_model(fixture_config(p))
    t = preprocess(synthetic_xray("positive", 0), h.config)
    v = embed(h, t)
    assert v.dim == 1024 and h.embedding_dim == 1024


def test_embed_without_layer(model_path):
    h = load_model(fixture_config(model_path, embedding=False))
    with pytest.raises(CapabilityError):
        embed(h, np.zeros(h.input_shape, dtype=np.float32))


def test_embedding_vector_validation():
    with pytest.raises(ValueError):
        EmbeddingVector(np.zeros(4), "e")
    with pytest.raises(ValueError):
        EmbeddingVector(np.array([1.0, np.nan]), "e")
    v = EmbeddingVector(np.array([1.0, 2.0]), "e")
    with pytest.raises(ValueError):
        v.values[0] = 3.0


_EMBED_SCRIPT = """
import sys
from xraybench.fixtures import fixture_config, synthetic_xray
from xraybench.runtime import embed, load_model, preprocess
h = load_model(fixture_config(sys.argv[1]))
v = embed(h, preprocess(synthetic_xray("positive", 7), h.config))
sys.stdout.write(v.values.tobytes().hex())
"""


def test_embedding_deterministic_across_processes(model_path):
    outs = {
        subprocess.run([sys.executable, "-c", _EMBED_SCRIPT, str(model_path)], check=True,
                       capture_output=True, text=True).stdout
        for _ in range(2)
    }
    assert len(outs) == 1
