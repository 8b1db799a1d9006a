from __future__ import annotations

import textwrap
from pathlib import Path

import pytest

from xraybench.fixtures import fixture_config, make_classifier_onnx, write_synthetic_manifest
from xraybench.mock_server import MockLLMServer
from xraybench.runtime import load_model

FIXTURES = Path(__file__).parent / "fixtures"


def read_fixture(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def model_path(tmp_path_factory) -> Path:
    return make_classifier_onnx(tmp_path_factory.mktemp("model") / "fixture.onnx")


@pytest.fixture(scope="session")
def model_config(model_path):
    return fixture_config(model_path)


@pytest.fixture(scope="session")
def handle(model_config):
    return load_model(model_config)


@pytest.fixture()
def mock_llm():
    with MockLLMServer() as server:
        yield server


@pytest.fixture()
def manifest_dir(tmp_path) -> Path:
    write_synthetic_manifest(tmp_path, n_train_per_class=10, n_test_per_class=5)
    return tmp_path


def write_run_file(directory: Path, model_path: Path, url: str, *, kb_path: str = "kb.xkb",
                   extra: str = "") -> Path:
    size = model_path.stat().st_size / 1e6
    text = textwrap.dedent(f"""\
        test_per_class: 200
        models:
          fixture:
            model_path: {model_path}
            input_width: 32
            input_height: 32
            model_size_mb: {size!r}
            mean: [0.5, 0.5, 0.5]
            scale: [2.0, 2.0, 2.0]
            positive_class_index: 0
            embedding_layer: embedding
        endpoints:
          mock:
            url: {url}
            model: mock-model
            max_retries: 1
            backoff_s: 0.01
            timeout_s: 5
        knowledge_bases:
          fixture-kb:
            path: {kb_path}
            embedder: fixture
        defaults:
          memory:
            app_size_mb: 400
            instance_total_mb: 1024
        configs:
          - id: local-fixture
            kind: local
            model: fixture
          - id: llm-nano
            kind: llm
            endpoint: mock
            server_profile: gpt-4.1-nano
          - id: llm-nano-kb
            kind: llm_with_kb
            endpoint: mock
            kb: fixture-kb
            server_profile: gpt-4.1-nano
            memory:
              app_size_mb: 430
        """) + extra
    p = directory / "run.yaml"
    p.write_text(text)
    return p


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("acceptance")
    if m is not None:
        outcome.get_result().acceptance = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{verdict}] criterion {number}: {title}")
