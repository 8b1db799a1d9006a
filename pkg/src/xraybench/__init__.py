"""Accuracy and carbon-footprint benchmarking of chest X-ray classifiers:
local ONNX models, probability-restricted LLM endpoints, and LLMs given
embedding-similarity context."""

__version__ = "0.1.0"
