"""Benchmark orchestration: run configurations over a manifest, persist
records incrementally, and assemble report bundles."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import httpx
import yaml

from xraybench import carbon, kb as kbmod, llm, metrics, reference
from xraybench.carbon import InfrastructureProfile, MemoryContext, ProfileRegistry
from xraybench.errors import (
    AuthenticationError,
    BackendError,
    ConfigError,
    EmptyInputError,
    EndpointTimeoutError,
    InputFormatError,
    MalformedResponseError,
    ParseError,
    ReportError,
    RunAbortedError,
)
from xraybench.metrics import InferenceRecord
from xraybench.runtime import LocalModelConfig, ModelHandle, classify, embed, load_model, preprocess

log = logging.getLogger(__name__)

KINDS = ("local", "llm", "llm_with_kb")
TIMING_MODES = ("sequential", "concurrent")
TIME_BASES = ("round_trip", "end_to_end")
DEFAULT_TEST_PER_CLASS = 200
TRANSPORT_ABORT_FRACTION = 0.10


# -- manifests -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    path: Path
    label: str
    split: str


@dataclass
class LabeledManifest:
    rows: list[ManifestRow]
    sha256: str
    source: Path | None = None

    def __post_init__(self) -> None:
        seen = set()
        for r in self.rows:
            if r.sample_id in seen:
                raise ConfigError(f"duplicate sample_id {r.sample_id!r} in manifest")
            seen.add(r.sample_id)
            if r.label not in ("positive", "negative"):
                raise ConfigError(f"{r.sample_id}: label must be positive/negative, got {r.label!r}")

    @classmethod
    def load(cls, path: str | Path) -> "LabeledManifest":
        path = Path(path)
        raw = path.read_bytes()
        base = path.parent
        rows = []
        reader = csv.DictReader(io.StringIO(raw.decode("utf-8")))
        missing = {"sample_id", "path", "label"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: manifest lacks columns {sorted(missing)}")
        for rec in reader:
            p = Path(rec["path"])
            rows.append(ManifestRow(
                sample_id=rec["sample_id"].strip(),
                path=p if p.is_absolute() else base / p,
                label=rec["label"].strip().lower(),
                split=(rec.get("split") or "test").strip().lower(),
            ))
        return cls(rows, hashlib.sha256(raw).hexdigest(), path)

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def select_test(self, per_class: int | None = DEFAULT_TEST_PER_CLASS, split: str = "test") -> list[ManifestRow]:
        """Up to ``per_class`` rows of each label, in manifest order."""
        rows = self.split(split)
        if per_class is None:
            return rows
        taken = {"positive": 0, "negative": 0}
        out = []
        for r in rows:
            if taken[r.label] < per_class:
                taken[r.label] += 1
                out.append(r)
        return out


def check_paths(rows: Iterable[ManifestRow]) -> None:
    missing = [r.sample_id for r in rows if not r.path.is_file()]
    if missing:
        raise ConfigError(f"{len(missing)} manifest images missing, e.g. {missing[:3]}")


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class KnowledgeBaseRef:
    name: str
    path: Path
    embedder: str


@dataclass(frozen=True)
class BenchConfig:
    config_id: str
    kind: str
    memory: MemoryContext
    model: LocalModelConfig | None = None
    endpoint: llm.EndpointConfig | None = None
    template: str | None = None
    kb: KnowledgeBaseRef | None = None
    embedder: LocalModelConfig | None = None
    app_profile: str = "app"
    server_profile: str | None = None
    timing_mode: str = "sequential"
    time_basis: str = "round_trip"
    concurrency: int = 4
    k: int = kbmod.DEFAULT_K

    def __post_init__(self) -> None:
        cid = self.config_id
        if self.kind not in KINDS:
            raise ConfigError(f"{cid}: kind must be one of {KINDS}")
        if self.timing_mode not in TIMING_MODES:
            raise ConfigError(f"{cid}: timing_mode must be one of {TIMING_MODES}")
        if self.time_basis not in TIME_BASES:
            raise ConfigError(f"{cid}: time_basis must be one of {TIME_BASES}")
        if self.kind == "local":
            if self.model is None:
                raise ConfigError(f"{cid}: local configs need a model")
            if not self.memory.model_size_mb > 0:
                raise ConfigError(f"{cid}: local configs need model_size_mb > 0")
        else:
            if self.endpoint is None or self.server_profile is None:
                raise ConfigError(f"{cid}: LLM configs need an endpoint and a server_profile")
            if self.memory.model_size_mb != 0:
                log.warning("%s: remote model, forcing model_size_mb=0", cid)
                object.__setattr__(self, "memory", replace(self.memory, model_size_mb=0.0))
            if self.template is None:
                default = llm.DEFAULT_KB_TEMPLATE if self.kind == "llm_with_kb" else llm.DEFAULT_TEMPLATE
                object.__setattr__(self, "template", default)
            if self.template not in llm.TEMPLATES:
                raise ConfigError(f"{cid}: unknown template {self.template!r}")
        if self.kind == "llm_with_kb":
            if self.kb is None or self.embedder is None:
                raise ConfigError(f"{cid}: llm_with_kb configs need a kb reference with an embedder")
            if llm.TEMPLATES[self.template].context_slot is None:
                raise ConfigError(f"{cid}: template {self.template!r} has no context slot")
        if self.concurrency < 1:
            raise ConfigError(f"{cid}: concurrency must be >= 1")

    @property
    def is_remote(self) -> bool:
        return self.kind != "local"

    def describe(self) -> dict:
        d = {
            "config_id": self.config_id,
            "kind": self.kind,
            "memory": asdict(self.memory),
            "memory_fraction": self.memory.fraction,
            "app_profile": self.app_profile,
            "server_profile": self.server_profile,
            "timing_mode": self.timing_mode,
            "time_basis": self.time_basis if self.is_remote else None,
        }
        if self.model:
            d["model"] = self.model.to_dict()
        if self.endpoint:
            d["endpoint"] = {"id": self.endpoint.id, "model": self.endpoint.model}
            d["template"] = self.template
        if self.kb:
            d["kb"] = {"name": self.kb.name, "embedder": self.kb.embedder, "k": self.k}
        return d


@dataclass
class RunPlan:
    configs: list[BenchConfig]
    registry: ProfileRegistry
    models: dict[str, LocalModelConfig]
    test_per_class: int | None = DEFAULT_TEST_PER_CLASS
    threshold: float = metrics.DEFAULT_THRESHOLD

    def config(self, config_id: str) -> BenchConfig:
        for c in self.configs:
            if c.config_id == config_id:
                return c
        raise ConfigError(f"no config {config_id!r} in run file")


def load_run_file(path: str | Path) -> RunPlan:
    """Parse a YAML run file. Relative paths resolve against its directory;
    ``${VAR}`` in endpoint URLs expands from the environment."""
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}

    if data.get("profiles_file"):
        pf = Path(data["profiles_file"])
        registry = ProfileRegistry.load(pf if pf.is_absolute() else base / pf)
    else:
        registry = ProfileRegistry.from_dict(data.get("profiles") or {})

    models = {name: LocalModelConfig.from_dict({"id": name, **entry}, base)
              for name, entry in (data.get("models") or {}).items()}
    endpoints = {}
    for name, entry in (data.get("endpoints") or {}).items():
        entry = dict(entry)
        entry["url"] = os.path.expandvars(entry["url"])
        endpoints[name] = llm.EndpointConfig(id=name, **entry)
    kbs = {}
    for name, entry in (data.get("knowledge_bases") or {}).items():
        p = Path(entry["path"])
        kbs[name] = KnowledgeBaseRef(name, p if p.is_absolute() else base / p, entry["embedder"])

    defaults = data.get("defaults") or {}
    configs = []
    for raw in data.get("configs") or []:
        entry = {**defaults, **raw}
        cid = entry["id"]
        kind = entry["kind"]
        mem = dict(defaults.get("memory") or {})
        mem.update(raw.get("memory") or {})
        model = models.get(entry["model"]) if entry.get("model") else None
        if entry.get("model") and model is None:
            raise ConfigError(f"{cid}: unknown model {entry['model']!r}")
        if kind == "local":
            mem.setdefault("model_size_mb", model.model_size_mb if model else 0.0)
        else:
            mem.setdefault("model_size_mb", 0.0)
        try:
            memory = MemoryContext(**mem)
        except TypeError as exc:
            raise ConfigError(f"{cid}: bad memory block: {exc}") from exc
        endpoint = None
        if entry.get("endpoint"):
            if entry["endpoint"] not in endpoints:
                raise ConfigError(f"{cid}: unknown endpoint {entry['endpoint']!r}")
            endpoint = endpoints[entry["endpoint"]]
        kb_ref = embedder = None
        if entry.get("kb"):
            if entry["kb"] not in kbs:
                raise ConfigError(f"{cid}: unknown knowledge base {entry['kb']!r}")
            kb_ref = kbs[entry["kb"]]
            if kb_ref.embedder not in models:
                raise ConfigError(f"{cid}: knowledge base embedder {kb_ref.embedder!r} is not a known model")
            embedder = models[kb_ref.embedder]
        configs.append(BenchConfig(
            config_id=cid,
            kind=kind,
            memory=memory,
            model=model,
            endpoint=endpoint,
            template=entry.get("template"),
            kb=kb_ref,
            embedder=embedder,
            app_profile=entry.get("app_profile", "app"),
            server_profile=entry.get("server_profile"),
            timing_mode=entry.get("timing_mode", "sequential"),
            time_basis=entry.get("time_basis", "round_trip"),
            concurrency=int(entry.get("concurrency", 4)),
            k=int(entry.get("k", kbmod.DEFAULT_K)),
        ))
        registry.get(configs[-1].app_profile)
        if configs[-1].server_profile:
            registry.get(configs[-1].server_profile)
    ids = [c.config_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate config ids in run file")
    per_class = data.get("test_per_class", DEFAULT_TEST_PER_CLASS)
    return RunPlan(configs, registry, models,
                   test_per_class=None if per_class is None else int(per_class),
                   threshold=float(data.get("threshold", metrics.DEFAULT_THRESHOLD)))


# -- record store --------------------------------------------------------------

class RecordStore:
    """Append-only JSON-lines file per config under ``<root>/records``."""

    def __init__(self, root: str | Path):
        self.dir = Path(root) / "records"
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, config_id: str) -> Path:
        return self.dir / f"{config_id}.jsonl"

    def load(self, config_id: str) -> list[InferenceRecord]:
        p = self.path(config_id)
        if not p.exists():
            return []
        data = p.read_bytes()
        if data and not data.endswith(b"\n"):
            # torn final write from a crash: drop the partial line
            keep = data[: data.rfind(b"\n") + 1]
            log.warning("%s: discarding partial trailing record", p)
            p.write_bytes(keep)
            data = keep
        return [InferenceRecord.from_dict(json.loads(line)) for line in data.decode("utf-8").splitlines() if line]

    def append(self, record: InferenceRecord) -> None:
        line = json.dumps(record.to_dict(), sort_keys=True) + "\n"
        with open(self.path(record.config_id), "a", encoding="utf-8") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())

    def config_ids(self) -> list[str]:
        return sorted(p.stem for p in self.dir.glob("*.jsonl"))


# -- running -------------------------------------------------------------------

@dataclass
class _Prepared:
    config: BenchConfig
    app: InfrastructureProfile
    server: InfrastructureProfile | None
    handle: ModelHandle | None = None
    embedder: ModelHandle | None = None
    kb: kbmod.KnowledgeBase | None = None
    template: llm.PromptTemplate | None = None
    client: httpx.Client | None = None


def _prepare(config: BenchConfig, registry: ProfileRegistry,
             handles: dict[str, ModelHandle]) -> _Prepared:
    def handle_for(mc: LocalModelConfig) -> ModelHandle:
        if mc.id not in handles:
            handles[mc.id] = load_model(mc)
        return handles[mc.id]

    prep = _Prepared(
        config,
        registry.get(config.app_profile),
        registry.get(config.server_profile) if config.server_profile else None,
    )
    if config.kind == "local":
        prep.handle = handle_for(config.model)
        return prep
    prep.template = llm.TEMPLATES[config.template]
    prep.client = httpx.Client(timeout=config.endpoint.timeout_s)
    if config.kind == "llm_with_kb":
        prep.embedder = handle_for(config.embedder)
        if not prep.embedder.supports_embedding:
            raise ConfigError(f"{config.config_id}: embedder {config.embedder.id} has no embedding layer")
        prep.kb = kbmod.KnowledgeBase.load(config.kb.path)
        if prep.kb.embedder_id != prep.embedder.id:
            raise ConfigError(
                f"{config.config_id}: knowledge base built by {prep.kb.embedder_id}, query embedder is {prep.embedder.id}"
            )
        if len(prep.kb) and prep.kb.dim != prep.embedder.embedding_dim:
            raise ConfigError(
                f"{config.config_id}: knowledge base dim {prep.kb.dim} != embedder dim {prep.embedder.embedding_dim}"
            )
    return prep


def attribute_carbon(record: InferenceRecord, config: BenchConfig, app: InfrastructureProfile,
                     server: InfrastructureProfile | None) -> InferenceRecord:
    """Fill the carbon fields of ``record`` from its timers."""
    record.app_carbon_mg = carbon.footprint(app, record.end_to_end_ms / 1000.0)
    if server is not None:
        basis, alt = (record.model_exec_ms, record.end_to_end_ms)
        if config.time_basis == "end_to_end":
            basis, alt = alt, basis
        record.remote_carbon_mg = carbon.footprint(server, basis / 1000.0)
        record.remote_carbon_alt_mg = carbon.footprint(server, alt / 1000.0)
        record.time_basis = config.time_basis
    else:
        record.remote_carbon_mg = 0.0
        record.remote_carbon_alt_mg = None
        record.time_basis = None
    record.carbon_mg = record.app_carbon_mg + record.remote_carbon_mg
    record.memory_fraction = config.memory.fraction
    record.carbon_per_mb_mg = carbon.memory_scaled_footprint(record.carbon_mg, config.memory)
    return record


def _infer_row(prep: _Prepared, row: ManifestRow, manifest_sha: str) -> tuple[InferenceRecord, bool]:
    """Process one sample. Returns (record, transport_failed)."""
    cfg = prep.config
    data = row.path.read_bytes()
    fields: dict = {}
    transport_failed = False
    started = time.time()
    t0 = time.perf_counter()
    model_exec_ms: float | None = None
    if cfg.kind == "local":
        try:
            fields["diagnosis"] = classify(prep.handle, preprocess(data, prep.handle.config))
        except (InputFormatError, BackendError, ValueError) as exc:
            fields.update(anomaly="inference_error", detail=str(exc))
    else:
        try:
            context = None
            if prep.kb is not None:
                q = embed(prep.embedder, preprocess(data, prep.embedder.config))
                context = kbmod.render_context(kbmod.retrieve(prep.kb, q, cfg.k))
            payload = llm.build_prompt(prep.template, data, context, model=cfg.endpoint.model)
            req = llm.send(cfg.endpoint, payload, prep.client)
        except (EndpointTimeoutError, MalformedResponseError) as exc:
            fields.update(anomaly="transport_error", detail=str(exc))
            transport_failed = True
        except (InputFormatError, BackendError, ValueError) as exc:
            fields.update(anomaly="inference_error", detail=str(exc))
        else:
            model_exec_ms = req.round_trip_ms
            fields.update(prompt_tokens=req.prompt_tokens, completion_tokens=req.completion_tokens,
                          raw_text=req.raw_text)
            estimate = llm.estimate_text_tokens(llm.payload_text(payload))
            if llm.verify_image_delivery(req, estimate) is llm.DeliveryVerdict.SUSPECT_NO_IMAGE:
                fields.update(anomaly="suspect_no_image",
                              detail=f"prompt_tokens={req.prompt_tokens} < {estimate}+{llm.IMAGE_TOKEN_FLOOR}")
            elif llm.is_refusal(req.raw_text):
                fields.update(anomaly="refusal")
            else:
                try:
                    fields["diagnosis"] = llm.parse_probabilities(req.raw_text)
                except ParseError as exc:
                    fields.update(anomaly="parse_error", detail=str(exc))
    end_to_end_ms = (time.perf_counter() - t0) * 1000.0
    finished = time.time()
    if model_exec_ms is None or cfg.kind == "local":
        model_exec_ms = end_to_end_ms
    record = InferenceRecord(
        config_id=cfg.config_id,
        sample_id=row.sample_id,
        ground_truth=row.label,
        diagnosis=fields.pop("diagnosis", None),
        end_to_end_ms=end_to_end_ms,
        model_exec_ms=min(model_exec_ms, end_to_end_ms),
        started_at=started,
        finished_at=finished,
        manifest_sha=manifest_sha,
        **fields,
    )
    return attribute_carbon(record, cfg, prep.app, prep.server), transport_failed


def run(config: BenchConfig, manifest: LabeledManifest, out_dir: str | Path, registry: ProfileRegistry,
        *, test_per_class: int | None = DEFAULT_TEST_PER_CLASS,
        handles: dict[str, ModelHandle] | None = None) -> list[InferenceRecord]:
    """Run ``config`` over the manifest's test rows, resuming past progress.

    Each record is appended to ``<out_dir>/records/<config_id>.jsonl`` as soon
    as it completes.
    """
    rows = manifest.select_test(test_per_class)
    if not rows:
        raise EmptyInputError("manifest has no test rows")
    check_paths(rows)
    store = RecordStore(out_dir)
    existing = store.load(config.config_id)
    stale = {r.manifest_sha for r in existing} - {manifest.sha256}
    if stale:
        raise ConfigError(f"{config.config_id}: existing records come from a different manifest")
    done = {r.sample_id for r in existing}
    pending = [r for r in rows if r.sample_id not in done]
    handles = {} if handles is None else handles
    prep = _prepare(config, registry, handles)
    abort_after = max(1.0, TRANSPORT_ABORT_FRACTION * len(rows))
    consecutive = 0
    log.info("%s: %d/%d samples pending", config.config_id, len(pending), len(rows))

    def results() -> Iterator[tuple[InferenceRecord, bool]]:
        if config.timing_mode == "sequential" or config.concurrency == 1:
            for row in pending:
                yield _infer_row(prep, row, manifest.sha256)
        else:
            with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
                yield from pool.map(lambda r: _infer_row(prep, r, manifest.sha256), pending)

    try:
        for record, failed in results():
            store.append(record)
            consecutive = consecutive + 1 if failed else 0
            if consecutive > abort_after:
                raise RunAbortedError(
                    f"{config.config_id}: {consecutive} consecutive transport failures"
                )
    except AuthenticationError as exc:
        raise RunAbortedError(f"{config.config_id}: {exc}") from exc
    finally:
        if prep.client is not None:
            prep.client.close()

    by_id = {r.sample_id: r for r in store.load(config.config_id)}
    return [by_id[r.sample_id] for r in rows if r.sample_id in by_id]


RUN_META = "run_meta.json"


def write_run_meta(out_dir: str | Path, plan: RunPlan, manifest: LabeledManifest,
                   configs: Sequence[BenchConfig]) -> Path:
    """Merge config descriptions into ``<out_dir>/run_meta.json``."""
    path = Path(out_dir) / RUN_META
    meta = json.loads(path.read_text()) if path.exists() else {"configs": {}}
    for c in configs:
        meta["configs"][c.config_id] = c.describe()
    meta["profiles"] = plan.registry.to_dict()
    meta["templates"] = {k: {"system_text": t.system_text, "context_slot": t.context_slot}
                         for k, t in llm.TEMPLATES.items()}
    meta["threshold"] = plan.threshold
    meta["histogram_bins"] = metrics.DEFAULT_BINS
    meta["image_token_floor"] = llm.IMAGE_TOKEN_FLOOR
    meta["percent_pair_tolerance"] = llm.PERCENT_PAIR_TOLERANCE
    meta["test_per_class"] = plan.test_per_class
    meta["manifest_sha256"] = manifest.sha256
    meta["decoding"] = "endpoint default temperature"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def run_plan(plan: RunPlan, manifest: LabeledManifest, out_dir: str | Path,
             config_ids: Sequence[str] | None = None) -> dict[str, list[InferenceRecord]]:
    configs = [plan.config(c) for c in config_ids] if config_ids else plan.configs
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_run_meta(out_dir, plan, manifest, configs)
    handles: dict[str, ModelHandle] = {}
    return {
        c.config_id: run(c, manifest, out_dir, plan.registry, test_per_class=plan.test_per_class, handles=handles)
        for c in configs
    }


# -- reporting -----------------------------------------------------------------

@dataclass
class ReportBundle:
    files: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, content in sorted(self.files.items()):
            (out / name).write_text(content, encoding="utf-8")
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, content in sorted(self.files.items()):
            h.update(name.encode() + b"\0" + content.encode() + b"\0")
        return h.hexdigest()


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float | None) -> str:
    return "undefined" if x is None else repr(float(x))


def _md_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def report(records: dict[str, list[InferenceRecord]], meta: dict,
           registry: ProfileRegistry | None = None) -> ReportBundle:
    """Assemble accuracy/performance tables, histograms, the sustained-use
    comparison, anomalies and run metadata. Output is a pure function of the
    inputs."""
    records = {k: v for k, v in records.items() if v}
    if not records:
        raise ReportError("no records to report on")
    shas = {r.manifest_sha for recs in records.values() for r in recs}
    if len(shas) > 1:
        raise ReportError(f"records come from {len(shas)} different manifests")
    if registry is None:
        registry = ProfileRegistry.from_dict(meta.get("profiles") or {}, merge_defaults=False) \
            if meta.get("profiles") else ProfileRegistry()
    threshold = float(meta.get("threshold", metrics.DEFAULT_THRESHOLD))
    cmeta = meta.get("configs", {})

    summaries: dict[str, metrics.MetricsSummary | None] = {}
    for cid in sorted(records):
        try:
            summaries[cid] = metrics.summarize(records[cid], threshold)
        except EmptyInputError:
            summaries[cid] = None

    t2_header = ["config_id", "kind", "accuracy_pct", "median_time_ms", "iqr_time_ms",
                 "median_model_exec_ms", "median_carbon_mg", "median_carbon_alt_basis_mg",
                 "memory_used_pct", "median_carbon_per_mb", "time_basis", "billed_minimum_s", "n", "anomalies"]
    t3_header = ["config_id", "accuracy_pct", "specificity_pct", "sensitivity_pct", "ppv_pct",
                 "tp", "fp", "tn", "fn"]
    t2, t3, t2_md, t3_md = [], [], [], []
    for cid, s in summaries.items():
        kind = cmeta.get(cid, {}).get("kind", "unknown")
        basis = cmeta.get(cid, {}).get("time_basis") or ""
        n = len(records[cid])
        if s is None:
            t2.append([cid, kind, "undefined"] + ["undefined"] * 7 + [basis, carbon.MIN_BILLING_S, n, n])
            t3.append([cid] + ["undefined"] * 4 + [0, 0, 0, 0])
            continue
        rr = s.rates.rounded()
        t2.append([cid, kind, rr["accuracy"], _num(s.median_time_ms), _num(s.iqr_time_ms),
                   _num(s.median_model_exec_ms), _num(s.median_carbon_mg), _num(s.median_carbon_alt_mg),
                   _num(s.memory_percent), _num(s.median_carbon_per_mb), basis, carbon.MIN_BILLING_S,
                   n, s.anomalies])
        cm = s.confusion
        t3.append([cid, rr["accuracy"], rr["specificity"], rr["sensitivity"], rr["ppv"],
                   cm.tp, cm.fp, cm.tn, cm.fn])
        t2_md.append([cid, kind, rr["accuracy"], f"{s.median_time_ms:.0f}",
                      carbon.format_sig(s.median_carbon_mg), f"{s.memory_percent:.1f}",
                      carbon.format_sig(s.median_carbon_per_mb)])
        t3_md.append([cid, rr["accuracy"], rr["specificity"], rr["sensitivity"], rr["ppv"]])

    histograms = {cid: s.confidence_histogram for cid, s in summaries.items() if s is not None}

    anomalies = sorted(
        (r for recs in records.values() for r in recs if r.is_anomalous),
        key=lambda r: (r.config_id, r.sample_id),
    )
    anomaly_rows = [[r.config_id, r.sample_id, r.anomaly, r.prompt_tokens if r.prompt_tokens is not None else "",
                     r.detail or ""] for r in anomalies]

    used_profiles: list[str] = []
    for cid in sorted(records):
        c = cmeta.get(cid, {})
        for name in (c.get("app_profile", "app"), c.get("server_profile")):
            if name and name not in used_profiles:
                used_profiles.append(name)
    sustained = carbon.sustained_comparison(registry, used_profiles)

    refs = reference.reference_checks()

    files: dict[str, str] = {}
    files["performance.csv"] = _csv(t2_header, t2)
    files["accuracy.csv"] = _csv(t3_header, t3)
    files["summary.json"] = json.dumps(
        {cid: (s.to_dict() if s else None) for cid, s in summaries.items()}, indent=2, sort_keys=True) + "\n"
    files["histograms.json"] = json.dumps(
        {"bins": metrics.DEFAULT_BINS, "edges": [i / metrics.DEFAULT_BINS for i in range(metrics.DEFAULT_BINS + 1)],
         "configs": histograms}, indent=2, sort_keys=True) + "\n"
    files["sustained.csv"] = sustained.to_csv()
    files["sustained.json"] = sustained.to_json() + "\n"
    files["anomalies.csv"] = _csv(["config_id", "sample_id", "anomaly", "prompt_tokens", "detail"], anomaly_rows)
    files["reference_checks.json"] = json.dumps(refs, indent=2, sort_keys=True) + "\n"
    files["metadata.json"] = json.dumps(
        {**{k: v for k, v in meta.items()}, "reported_configs": sorted(records),
         "manifest_sha256": next(iter(shas))}, indent=2, sort_keys=True) + "\n"

    md = ["# Benchmark report", "",
          "## Performance", "",
          _md_table(["config", "kind", "accuracy %", "median time ms", "median carbon mgCO2eq",
                     "memory used %", "median carbon per MB mgCO2eq/MB"], t2_md), "",
          "Carbon figures are physical-runtime footprints. The hosting platform bills a "
          f"minimum of {carbon.MIN_BILLING_S:.0f} s per use; that minimum is not folded in.", "",
          "## Accuracy", "",
          _md_table(["config", "accuracy %", "specificity %", "sensitivity %", "PPV %"], t3_md), "",
          "## Sustained use (3 h)", "",
          _md_table(["label", "gCO2eq", f"ratio to {sustained.baseline}"],
                    [[r.label, carbon.format_sig(r.value_g), r.ratio_text()] for r in sustained.rows]), "",
          "## Anomalies", "",
          _md_table(["config", "sample", "kind", "prompt tokens", "detail"], anomaly_rows) if anomaly_rows
          else "No anomalous records.", "",
          "## Reference checks", "",
          reference.render_markdown(refs), ""]
    files["report.md"] = "\n".join(md)
    files["checksums.sha256"] = "".join(
        f"{hashlib.sha256(files[name].encode()).hexdigest()}  {name}\n" for name in sorted(files)
    )
    return ReportBundle(files)


def load_run(run_dir: str | Path) -> tuple[dict[str, list[InferenceRecord]], dict]:
    run_dir = Path(run_dir)
    meta_path = run_dir / RUN_META
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    store = RecordStore(run_dir)
    return {cid: store.load(cid) for cid in store.config_ids()}, meta


def estimate(profile_name: str, duration_s: float, memory_fraction: float,
             registry: ProfileRegistry | None = None) -> carbon.FootprintBreakdown:
    registry = registry or ProfileRegistry()
    profile = registry.get(profile_name)
    return carbon.breakdown(profile, duration_s, MemoryContext.from_fraction(memory_fraction))
