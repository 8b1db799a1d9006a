"""Synthetic end-to-end run: fixture classifier, mock LLM endpoint, tiny manifest.

    python3 scripts/dry_run.py --out runs/dry --train 10 --test 5

Builds a knowledge base, runs a local, a bare-LLM and a KB-augmented
configuration, then writes the report bundle to ``<out>/run/report``.
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

import yaml

from xraybench import harness, kb as kbmod
from xraybench.fixtures import fixture_config, make_classifier_onnx, write_synthetic_manifest
from xraybench.mock_server import MockLLMServer
from xraybench.runtime import load_model


def write_run_file(work: Path, model: Path, url: str) -> Path:
    cfg = fixture_config(model)
    data = {
        "models": {"fixture": {k: v for k, v in cfg.to_dict().items() if k != "id"}},
        "endpoints": {"mock": {"url": url, "model": "mock-model", "max_retries": 1, "backoff_s": 0.05}},
        "knowledge_bases": {"fixture-kb": {"path": "kb.xkb", "embedder": "fixture"}},
        "defaults": {"memory": {"app_size_mb": 376.8, "instance_total_mb": 1024}},
        "configs": [
            {"id": "local-fixture", "kind": "local", "model": "fixture"},
            {"id": "mock-nano", "kind": "llm", "endpoint": "mock", "server_profile": "gpt-4.1-nano"},
            {"id": "mock-nano+kb", "kind": "llm_with_kb", "endpoint": "mock", "kb": "fixture-kb",
             "server_profile": "gpt-4.1-nano", "memory": {"app_size_mb": 421.9}},
        ],
    }
    path = work / "run.yaml"
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/dry"))
    ap.add_argument("--train", type=int, default=10, help="training images per class (knowledge base)")
    ap.add_argument("--test", type=int, default=5, help="test images per class")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("httpx").setLevel(logging.WARNING)

    work = args.out.resolve()
    work.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest_path = write_synthetic_manifest(work, args.train, args.test, seed=args.seed)
    model = make_classifier_onnx(work / "fixture.onnx", seed=args.seed)

    with MockLLMServer() as server:
        plan = harness.load_run_file(write_run_file(work, model, server.url))
        manifest = harness.LabeledManifest.load(manifest_path)
        embedder = load_model(plan.models["fixture"])
        rows = [(r.sample_id, r.label, r.path.read_bytes) for r in manifest.split("train")]
        kbmod.build(rows, embedder).save(work / "kb.xkb")
        harness.run_plan(plan, manifest, work / "run")

    records, meta = harness.load_run(work / "run")
    bundle = harness.report(records, meta)
    out = bundle.write(work / "run" / "report")
    print(bundle.files["accuracy.csv"])
    print(f"report bundle: {out}  sha256 {bundle.checksum()[:16]}  ({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
