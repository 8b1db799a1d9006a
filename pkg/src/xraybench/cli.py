"""Command-line entry point: ``xraybench {build-kb,run,report,estimate,serve-mock,reference}``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from xraybench import carbon, harness, kb as kbmod, reference
from xraybench.carbon import ProfileRegistry
from xraybench.errors import XrayBenchError
from xraybench.runtime import load_model


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int) -> None:
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(2)


@main.command("build-kb")
@click.argument("run_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--embedder", required=True, help="Model name (from the run file) used to embed images.")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="train", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def build_kb(run_file: str, embedder: str, manifest: str, split: str, out_path: str) -> None:
    """Embed a manifest split into a knowledge-base file."""
    try:
        plan = harness.load_run_file(run_file)
        if embedder not in plan.models:
            raise XrayBenchError(f"unknown model {embedder!r}; known: {sorted(plan.models)}")
        handle = load_model(plan.models[embedder])
        man = harness.LabeledManifest.load(manifest)
        rows = [(r.sample_id, r.label, r.path.read_bytes) for r in man.split(split)]
        kb = kbmod.build(rows, handle)
        kb.save(out_path)
    except (XrayBenchError, OSError) as exc:
        _fail(exc)
    click.echo(f"wrote {out_path}: {len(kb)} entries, dim {kb.dim}, embedder {kb.embedder_id}")


@main.command("run")
@click.argument("run_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_ids", multiple=True, help="Restrict to these config ids (repeatable).")
def run_cmd(run_file: str, manifest: str, out_dir: str, config_ids: tuple[str, ...]) -> None:
    """Run configurations over the manifest's test split (resumable)."""
    try:
        plan = harness.load_run_file(run_file)
        man = harness.LabeledManifest.load(manifest)
        results = harness.run_plan(plan, man, out_dir, config_ids or None)
    except XrayBenchError as exc:
        _fail(exc)
    for cid, recs in results.items():
        bad = sum(r.is_anomalous for r in recs)
        click.echo(f"{cid}: {len(recs)} records ({bad} anomalous)")


@main.command("report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Defaults to RUN_DIR/report.")
def report_cmd(run_dir: str, out_dir: str | None) -> None:
    """Build the report bundle from stored records."""
    try:
        records, meta = harness.load_run(run_dir)
        bundle = harness.report(records, meta)
    except XrayBenchError as exc:
        _fail(exc)
    out = bundle.write(out_dir or Path(run_dir) / "report")
    click.echo(f"wrote {len(bundle.files)} files to {out} (bundle sha256 {bundle.checksum()[:16]})")


@main.command("estimate")
@click.argument("profile")
@click.argument("duration_s", type=float)
@click.argument("memory_fraction", type=float)
@click.option("--profiles", "profiles_file", type=click.Path(exists=True, dir_okay=False),
              help="YAML profiles file (merged over the built-in profiles).")
@click.option("--json", "as_json", is_flag=True)
def estimate_cmd(profile: str, duration_s: float, memory_fraction: float,
                 profiles_file: str | None, as_json: bool) -> None:
    """Footprint of running PROFILE for DURATION_S seconds at MEMORY_FRACTION of instance memory."""
    try:
        registry = ProfileRegistry.load(profiles_file) if profiles_file else ProfileRegistry()
        b = harness.estimate(profile, duration_s, memory_fraction, registry)
    except (XrayBenchError, ValueError) as exc:
        _fail(exc)
    if as_json:
        click.echo(json.dumps({"profile": b.profile_name, "duration_s": b.duration_s,
                               "total_mg": b.total_mg, "memory_scaled_mg_per_mb": b.memory_scaled_mg_per_mb}))
    else:
        click.echo(f"profile   {b.profile_name}")
        click.echo(f"duration  {b.duration_s:g} s")
        click.echo(f"E         {carbon.format_sig(b.total_mg)} mgCO2eq")
        click.echo(f"E_m       {carbon.format_sig(b.memory_scaled_mg_per_mb)} mgCO2eq/MB")
        if b.duration_s < carbon.MIN_BILLING_S:
            click.echo(f"note      billed as {carbon.MIN_BILLING_S:.0f} s by the hosting platform (not included)")


@main.command("serve-mock")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8765, show_default=True, type=int)
@click.option("--api-key", default=None, help="Require this bearer token.")
def serve_mock(host: str, port: int, api_key: str | None) -> None:
    """Serve the deterministic mock chat-completion endpoint."""
    from xraybench.mock_server import MockLLMServer

    server = MockLLMServer(host, port, api_key=api_key)
    click.echo(f"mock endpoint at {server.url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()


@main.command("reference")
def reference_cmd() -> None:
    """Print the carbon model checked against the published figures."""
    click.echo(reference.render_markdown(reference.reference_checks()))


if __name__ == "__main__":
    main()
