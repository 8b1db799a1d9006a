import copy
import json
import socket

import httpx
import pytest
from hypothesis import given, strategies as st

from conftest import read_fixture
from xraybench import llm
from xraybench.errors import (
    AuthenticationError,
    EndpointTimeoutError,
    InconsistentProbabilitiesError,
    InputFormatError,
    MalformedResponseError,
    ParseError,
    TemplateError,
)
from xraybench.fixtures import synthetic_xray
from xraybench.llm import (
    DeliveryVerdict,
    EndpointConfig,
    LlmRequestRecord,
    PromptTemplate,
    TEMPLATES,
    build_prompt,
    parse_probabilities,
    render_probabilities,
    send,
    verify_image_delivery,
)
from xraybench.mock_server import ScriptedReply, deterministic_reply

IMG = synthetic_xray("positive", 0)

TWO_LINE_VERBATIM = (
    "You are an assistant radiologist, ready to dissect medical cases and give medical insights. "
    "You must give a probability that the provided x-ray shows Covid-19 symptoms. You must also give "
    "a probability that the provided x-ray shows someone with no Covid-19 symptoms. Assume that any "
    "recommendations you give will then be verified by a human radiologist.\nOutput in the format:\n\n"
    "Probability of Covid-19 symptoms based on imaging: Approximately __\n"
    "Probability of no Covid-19 symptoms based on imaging: Approximately __"
)


def endpoint(url, **kw):
    return EndpointConfig(id="mock", url=url, model="mock-model", **{"max_retries": 1, "backoff_s": 0.01,
                                                                     "timeout_s": 5, **kw})


def record(prompt_tokens):
    return LlmRequestRecord("e", prompt_tokens, 10, 5.0, "x", True)


# -- templates and payloads ---------------------------------------------------

def test_two_line_template_verbatim():
    payload = build_prompt(TEMPLATES["two_line"], IMG)
    assert payload["messages"][0] == {"role": "system", "content": TWO_LINE_VERBATIM}
    assert llm.payload_has_image(payload)


def test_image_inline_base64():
    import base64
    url = build_prompt(TEMPLATES["radiological"], IMG)["messages"][1]["content"][0]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == IMG


def test_jpeg_mime():
    url = build_prompt(TEMPLATES["radiological"], synthetic_xray("negative", 0, fmt="JPEG"))
    assert url["messages"][1]["content"][0]["image_url"]["url"].startswith("data:image/jpeg;base64,")


def test_context_inserted_before_output_format():
    ctx = "Line one\nLine two\nLine three"
    text = build_prompt(TEMPLATES["radiological_kb"], IMG, context=ctx)["messages"][0]["content"]
    assert text.index("Line one") < text.index("Output format:")
    assert text.endswith(llm.RADIOLOGICAL_PROMPT.split("Output", 1)[1])
    assert text.startswith(llm.RADIOLOGICAL_PROMPT.split("Output", 1)[0])
    assert [ln for ln in text.splitlines() if ln.startswith("Line")] == ctx.splitlines()


def test_kb_template_without_context_drops_slot():
    text = TEMPLATES["two_line_kb"].render()
    assert "{context}" not in text


def test_empty_image_rejected():
    with pytest.raises(InputFormatError):
        build_prompt(TEMPLATES["radiological"], b"")


def test_context_without_slot():
    with pytest.raises(TemplateError):
        build_prompt(TEMPLATES["two_line"], IMG, context="ctx")


def test_template_needs_output_lines():
    with pytest.raises(TemplateError):
        PromptTemplate("free", llm.FREEFORM_PROMPT)
    with pytest.raises(TemplateError):
        PromptTemplate("bad-slot", llm.TWO_LINE_PROMPT, context_slot="{ctx}")


def test_model_field():
    assert build_prompt(TEMPLATES["two_line"], IMG, model="m")["model"] == "m"


def test_token_estimate():
    assert llm.estimate_text_tokens("Hello, world!") == 4
    assert llm.estimate_text_tokens("") == 0


# -- transport ----------------------------------------------------------------

def test_send_returns_scripted_text(mock_llm):
    text = read_fixture("two_line_response.txt")
    mock_llm.enqueue(ScriptedReply(text=text, prompt_tokens=1200, completion_tokens=30))
    payload = build_prompt(TEMPLATES["two_line"], IMG)
    rec = send(endpoint(mock_llm.url), payload)
    assert rec.raw_text == text
    assert (rec.prompt_tokens, rec.completion_tokens) == (1200, 30)
    assert rec.image_attached and rec.round_trip_ms > 0 and rec.attempts == 1
    assert mock_llm.requests[0]["model"] == "mock-model"


def test_send_does_not_mutate_payload(mock_llm):
    payload = build_prompt(TEMPLATES["two_line"], IMG)
    before = copy.deepcopy(payload)
    send(endpoint(mock_llm.url), payload)
    assert payload == before


def test_low_token_count_flagged(mock_llm):
    mock_llm.enqueue(ScriptedReply(text=read_fixture("freeform_response.txt"), prompt_tokens=66))
    rec = send(endpoint(mock_llm.url), build_prompt(TEMPLATES["two_line"], IMG))
    assert verify_image_delivery(rec, 60) is DeliveryVerdict.SUSPECT_NO_IMAGE


def test_deterministic_reply_reports_image_tokens(mock_llm):
    payload = build_prompt(TEMPLATES["radiological"], IMG)
    rec = send(endpoint(mock_llm.url), payload)
    estimate = llm.estimate_text_tokens(llm.payload_text(payload))
    assert rec.prompt_tokens == estimate + 300
    assert verify_image_delivery(rec, estimate) is DeliveryVerdict.OK
    assert rec.raw_text == deterministic_reply(payload)[0]


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_unreachable_endpoint_times_out():
    ep = endpoint(f"http://127.0.0.1:{_free_port()}/v1/chat/completions", max_retries=2)
    with pytest.raises(EndpointTimeoutError, match="3 attempts"):
        send(ep, build_prompt(TEMPLATES["two_line"], IMG))


def test_transient_status_retried(mock_llm):
    mock_llm.enqueue(ScriptedReply(status=503), ScriptedReply(status=429))
    rec = send(endpoint(mock_llm.url, max_retries=2), build_prompt(TEMPLATES["two_line"], IMG))
    assert rec.attempts == 3


def test_transient_exhausted(mock_llm):
    mock_llm.enqueue(ScriptedReply(status=500), ScriptedReply(status=500))
    with pytest.raises(EndpointTimeoutError):
        send(endpoint(mock_llm.url), build_prompt(TEMPLATES["two_line"], IMG))


def test_wrong_key_is_authentication_error(monkeypatch):
    from xraybench.mock_server import MockLLMServer
    monkeypatch.setenv("XRB_TEST_KEY", "wrong")
    with MockLLMServer(api_key="right") as server:
        with pytest.raises(AuthenticationError):
            send(endpoint(server.url, api_key_env="XRB_TEST_KEY"), build_prompt(TEMPLATES["two_line"], IMG))
        assert server.requests == []
        monkeypatch.setenv("XRB_TEST_KEY", "right")
        send(endpoint(server.url, api_key_env="XRB_TEST_KEY"), build_prompt(TEMPLATES["two_line"], IMG))


def test_missing_key_env(monkeypatch):
    monkeypatch.delenv("XRB_ABSENT_KEY", raising=False)
    with pytest.raises(AuthenticationError):
        EndpointConfig("e", "http://x", api_key_env="XRB_ABSENT_KEY").headers()


@pytest.mark.parametrize("body", [b"not json", b'{"choices": []}', b'{"choices": [{"message": {"content": 5}}]}'])
def test_malformed_body(mock_llm, body):
    mock_llm.enqueue(ScriptedReply(raw_body=body))
    with pytest.raises(MalformedResponseError):
        send(endpoint(mock_llm.url), build_prompt(TEMPLATES["two_line"], IMG))


def test_shared_client(mock_llm):
    with httpx.Client() as client:
        a = send(endpoint(mock_llm.url), build_prompt(TEMPLATES["two_line"], IMG), client=client)
        b = send(endpoint(mock_llm.url), build_prompt(TEMPLATES["two_line"], IMG), client=client)
    assert a.raw_text == b.raw_text


def test_mock_body_sorted_keys(mock_llm):
    r = httpx.post(mock_llm.url, json=build_prompt(TEMPLATES["two_line"], IMG))
    assert list(json.loads(r.text)) == sorted(json.loads(r.text))


# -- parsing ------------------------------------------------------------------

def test_parse_two_line_fixture():
    d = parse_probabilities(read_fixture("two_line_response.txt"))
    assert (d.p_positive, d.p_negative) == (0.15, 0.85)


def test_parse_radiological_fixture():
    d = parse_probabilities(read_fixture("radiological_response.txt"))
    assert (d.p_positive, d.p_negative) == (0.10, 0.90)


def test_parse_freeform_missing_line():
    with pytest.raises(ParseError) as ei:
        parse_probabilities(read_fixture("freeform_response.txt"))
    assert not isinstance(ei.value, InconsistentProbabilitiesError)
    assert ei.value.raw_text.startswith("There is approximately")


def test_parse_inconsistent_pair():
    with pytest.raises(InconsistentProbabilitiesError):
        parse_probabilities(render_probabilities(60, 60))


def test_parse_tolerance_edge():
    assert parse_probabilities(render_probabilities(52, 53)).p_positive == 0.52
    with pytest.raises(InconsistentProbabilitiesError):
        parse_probabilities(render_probabilities(52, 54))


def test_parse_range_midpoint():
    text = (
        "Probability of COVID-19 symptoms based on imaging: Approximately **85-90%**\n"
        "Probability of no COVID-19 symptoms based on imaging: Approximately 10–15%"
    )
    d = parse_probabilities(text)
    assert d.p_positive == pytest.approx(0.875) and d.p_negative == pytest.approx(0.125)


def test_parse_tolerates_surrounding_prose():
    text = "Sure.\n\n" + render_probabilities(70) + "\n\nPlease consult a radiologist."
    assert parse_probabilities(text).p_positive == pytest.approx(0.7)


def test_parse_out_of_range():
    with pytest.raises(ParseError):
        parse_probabilities(render_probabilities(150, -50))


@given(st.integers(0, 100))
def test_render_parse_roundtrip(x):
    d = parse_probabilities(render_probabilities(x))
    assert d.p_positive == pytest.approx(x / 100) and d.p_negative == pytest.approx(1 - x / 100)


@given(st.text(max_size=200))
def test_parse_never_crashes_unexpectedly(text):
    try:
        d = parse_probabilities(text)
    except ParseError:
        return
    assert 0 <= d.p_positive <= 1


def test_refusal_heuristic():
    assert llm.is_refusal("I'm sorry, but I can't help with interpreting this image.")
    assert not llm.is_refusal(render_probabilities(40))


# -- image delivery -----------------------------------------------------------

@pytest.mark.parametrize("tokens,estimate,verdict", [
    (66, 60, DeliveryVerdict.SUSPECT_NO_IMAGE),
    (1500, 60, DeliveryVerdict.OK),
    (159, 60, DeliveryVerdict.SUSPECT_NO_IMAGE),
    (160, 60, DeliveryVerdict.OK),
])
def test_verify_image_delivery(tokens, estimate, verdict):
    assert verify_image_delivery(record(tokens), estimate) is verdict


def test_verify_rejects_bad_estimate():
    with pytest.raises(ValueError):
        verify_image_delivery(record(100), 0)


@given(st.integers(0, 10_000), st.integers(1, 5000), st.integers(0, 1000))
def test_verify_monotone(tokens, estimate, extra):
    if verify_image_delivery(record(tokens), estimate) is DeliveryVerdict.OK:
        assert verify_image_delivery(record(tokens + extra), estimate) is DeliveryVerdict.OK
