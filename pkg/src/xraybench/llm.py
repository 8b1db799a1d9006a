"""Probability-restricted chat-completion client for X-ray diagnosis.

Requests use the OpenAI-style ``/chat/completions`` wire format: a system
message carrying the instructions (and optional reference-case context) and a
user message carrying the image as an inline base64 ``image_url`` part.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Any

import httpx

from xraybench.errors import (
    AuthenticationError,
    EndpointTimeoutError,
    InconsistentProbabilitiesError,
    MalformedResponseError,
    ParseError,
    TemplateError,
)
from xraybench.runtime import Diagnosis, decode_image

log = logging.getLogger(__name__)

POSITIVE_LINE = "Probability of COVID-19 symptoms based on imaging: Approximately"
NEGATIVE_LINE = "Probability of no COVID-19 symptoms based on imaging: Approximately"
CONTEXT_PLACEHOLDER = "{context}"
# Points by which X + Y may miss 100 before the pair is rejected.
PERCENT_PAIR_TOLERANCE = 5.0
IMAGE_TOKEN_FLOOR = 100

# Free-form instruction that never asks for a fixed output format. Kept only
# as a fixture: it reproduces the missing-image failure mode.
FREEFORM_PROMPT = (
    "You are an assistant radiologist, ready to dissect medical cases and give medical "
    "insights. You must give a probability that the provided x-ray shows Covid-19 symptoms. "
    "Assume that any recommendations you give will then be verified by a human radiologist."
)

TWO_LINE_PROMPT = (
    "You are an assistant radiologist, ready to dissect medical cases and give medical "
    "insights. You must give a probability that the provided x-ray shows Covid-19 symptoms. "
    "You must also give a probability that the provided x-ray shows someone with no Covid-19 "
    "symptoms. Assume that any recommendations you give will then be verified by a human "
    "radiologist.\n"
    "Output in the format:\n"
    "\n"
    "Probability of Covid-19 symptoms based on imaging: Approximately __\n"
    "Probability of no Covid-19 symptoms based on imaging: Approximately __"
)

RADIOLOGICAL_PROMPT = (
    "You are an assistant radiologist trained in interpreting chest X-ray images for signs of "
    "COVID-19. Your task is to analyze the provided chest X-ray and estimate the likelihood "
    "that it shows signs consistent with COVID-19 infection.\n"
    "\n"
    "You must provide:\n"
    "\n"
    "A probability (in percentage) that the X-ray image indicates COVID-19-related symptoms "
    "(e.g., ground-glass opacities, bilateral infiltrates, or consolidation).\n"
    "\n"
    "A probability (in percentage) that the X-ray image shows no signs of COVID-19-related "
    "symptoms.\n"
    "\n"
    "Assume your analysis will be reviewed by a qualified human radiologist before informing "
    "any clinical decisions. Base your assessment solely on the imaging evidence.\n"
    "\n"
    "Output format:\n"
    "Probability of COVID-19 symptoms based on imaging: Approximately __%\n"
    "Probability of no COVID-19 symptoms based on imaging: Approximately __%"
)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    system_text: str
    context_slot: str | None = None

    def __post_init__(self) -> None:
        low = self.system_text.lower()
        for line in (POSITIVE_LINE, NEGATIVE_LINE):
            if line.rsplit(":", 1)[0].lower() not in low:
                raise TemplateError(f"{self.id}: system text lacks output line {line!r}")
        if self.context_slot is not None and self.context_slot not in self.system_text:
            raise TemplateError(f"{self.id}: context slot {self.context_slot!r} not in system text")

    def render(self, context: str | None = None) -> str:
        if context is None:
            if self.context_slot is None:
                return self.system_text
            return self.system_text.replace(self.context_slot, "").rstrip() + "\n"
        if self.context_slot is None:
            raise TemplateError(f"{self.id}: context supplied but template has no context slot")
        return self.system_text.replace(self.context_slot, context)


def _with_context(template_id: str, text: str) -> PromptTemplate:
    head, fmt = text.split("Output", 1)
    return PromptTemplate(template_id, f"{head}{CONTEXT_PLACEHOLDER}\n\nOutput{fmt}", CONTEXT_PLACEHOLDER)


TEMPLATES: dict[str, PromptTemplate] = {
    "two_line": PromptTemplate("two_line", TWO_LINE_PROMPT),
    "radiological": PromptTemplate("radiological", RADIOLOGICAL_PROMPT),
    "two_line_kb": _with_context("two_line_kb", TWO_LINE_PROMPT),
    "radiological_kb": _with_context("radiological_kb", RADIOLOGICAL_PROMPT),
}
DEFAULT_TEMPLATE = "radiological"
DEFAULT_KB_TEMPLATE = "radiological_kb"


def _sniff_mime(image_bytes: bytes) -> str:
    if image_bytes.startswith(b"\x89PNG"):
        return "image/png"
    return "image/jpeg"


def build_prompt(template: PromptTemplate, image_bytes: bytes, context: str | None = None,
                 model: str | None = None) -> dict[str, Any]:
    """Chat-completion payload: system instructions + one inline image."""
    decode_image(image_bytes)  # raises InputFormatError
    system = template.render(context)
    data_url = f"data:{_sniff_mime(image_bytes)};base64,{base64.b64encode(image_bytes).decode('ascii')}"
    payload: dict[str, Any] = {
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": [{"type": "image_url", "image_url": {"url": data_url}}]},
        ]
    }
    if model is not None:
        payload["model"] = model
    return payload


def payload_text(payload: dict) -> str:
    parts = []
    for msg in payload.get("messages", []):
        content = msg.get("content")
        if isinstance(content, str):
            parts.append(content)
        elif isinstance(content, list):
            parts.extend(p.get("text", "") for p in content if p.get("type") == "text")
    return "\n".join(parts)


def payload_has_image(payload: dict) -> bool:
    for msg in payload.get("messages", []):
        content = msg.get("content")
        if isinstance(content, list) and any(p.get("type") == "image_url" for p in content):
            return True
    return False


_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def estimate_text_tokens(text: str) -> int:
    """Rough BPE-like token count: words plus punctuation marks."""
    return len(_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class EndpointConfig:
    id: str
    url: str
    model: str | None = None
    api_key_env: str | None = None
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_s: float = 0.5

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise AuthenticationError(f"{self.id}: environment variable {self.api_key_env} is not set")
            h["Authorization"] = f"Bearer {key}"
        return h


@dataclass(frozen=True)
class LlmRequestRecord:
    endpoint_id: str
    prompt_tokens: int
    completion_tokens: int
    round_trip_ms: float
    raw_text: str
    image_attached: bool
    attempts: int = 1


_TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}


def send(endpoint: EndpointConfig, payload: dict, client: httpx.Client | None = None) -> LlmRequestRecord:
    """POST ``payload`` and time the successful round trip.

    Transport failures and 408/429/5xx are retried with exponential backoff;
    a response that arrives but cannot be interpreted is never retried.
    """
    body = json.dumps(payload if endpoint.model is None or "model" in payload
                      else {**payload, "model": endpoint.model}).encode("utf-8")
    headers = endpoint.headers()
    own = client is None
    client = client or httpx.Client(timeout=endpoint.timeout_s)
    last_err = "no attempt made"
    try:
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                time.sleep(endpoint.backoff_s * 2 ** (attempt - 1))
            t0 = time.perf_counter()
            try:
                resp = client.post(endpoint.url, content=body, headers=headers)
            except httpx.TransportError as exc:
                last_err = f"{type(exc).__name__}: {exc}"
                log.warning("%s: attempt %d failed: %s", endpoint.id, attempt + 1, last_err)
                continue
            elapsed_ms = (time.perf_counter() - t0) * 1000.0
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"{endpoint.id}: HTTP {resp.status_code}")
            if resp.status_code in _TRANSIENT_STATUS:
                last_err = f"HTTP {resp.status_code}"
                log.warning("%s: attempt %d got %s", endpoint.id, attempt + 1, last_err)
                continue
            if resp.status_code != 200:
                raise MalformedResponseError(f"{endpoint.id}: unexpected HTTP {resp.status_code}")
            return _record_from_response(endpoint, resp, elapsed_ms, payload_has_image(payload), attempt + 1)
    finally:
        if own:
            client.close()
    raise EndpointTimeoutError(
        f"{endpoint.id}: gave up after {endpoint.max_retries + 1} attempts ({last_err})"
    )


def _record_from_response(endpoint: EndpointConfig, resp: httpx.Response, elapsed_ms: float,
                          image_attached: bool, attempts: int) -> LlmRequestRecord:
    try:
        data = resp.json()
        text = data["choices"][0]["message"]["content"]
        usage = data.get("usage") or {}
        prompt_tokens = int(usage.get("prompt_tokens", 0))
        completion_tokens = int(usage.get("completion_tokens", 0))
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(f"{endpoint.id}: malformed completion body: {exc}") from exc
    if not isinstance(text, str):
        raise MalformedResponseError(f"{endpoint.id}: message content is not text")
    return LlmRequestRecord(
        endpoint_id=endpoint.id,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
        round_trip_ms=max(elapsed_ms, 1e-3),
        raw_text=text,
        image_attached=image_attached,
        attempts=attempts,
    )


_NUM = r"(\d+(?:\.\d+)?)"
_DASH = r"\s*(?:-|\u2013|\u2014|to)\s*"
_PCT = rf"{_NUM}(?:\s*%?{_DASH}{_NUM})?\s*%?"
_SEP = r"[\s\-]*"


def _line_re(negated: bool) -> re.Pattern:
    neg = rf"no{_SEP}" if negated else ""
    return re.compile(
        rf"probability{_SEP}of{_SEP}{neg}covid{_SEP}19{_SEP}symptoms{_SEP}based{_SEP}on{_SEP}imaging"
        rf"\s*:?\s*(?:approximately|approx\.?|about|~)?[\s*_]*{_PCT}",
        re.IGNORECASE,
    )


_POS_RE = _line_re(False)
_NEG_RE = _line_re(True)


def _percent(m: re.Match) -> float:
    lo = float(m.group(1))
    hi = m.group(2)
    return lo if hi is None else (lo + float(hi)) / 2.0


def parse_probabilities(raw_text: str) -> Diagnosis:
    """Extract the (positive, negative) percentage pair from an LLM reply.

    Ranges such as ``85-90%`` collapse to their midpoint.
    """
    text = raw_text.replace("**", "")
    pos = _POS_RE.search(text)
    neg = _NEG_RE.search(text)
    if pos is None or neg is None:
        missing = "positive" if pos is None else "negative"
        raise ParseError(f"{missing} probability line not found", raw_text)
    x, y = _percent(pos), _percent(neg)
    if not (0 <= x <= 100 and 0 <= y <= 100):
        raise ParseError(f"percentages out of range: {x}, {y}", raw_text)
    if abs(x + y - 100.0) > PERCENT_PAIR_TOLERANCE:
        raise InconsistentProbabilitiesError(f"percentages {x}% + {y}% do not sum to ~100%", raw_text)
    return Diagnosis(x / 100.0, y / 100.0)


def render_probabilities(p_positive_pct: float, p_negative_pct: float | None = None) -> str:
    """Format a reply exactly as the templates request it."""
    if p_negative_pct is None:
        p_negative_pct = 100 - p_positive_pct
    return (
        f"{POSITIVE_LINE} {p_positive_pct:g}%\n"
        f"{NEGATIVE_LINE} {p_negative_pct:g}%"
    )


_REFUSAL_RE = re.compile(
    r"\b(i\s*(?:'m|am)\s+(?:sorry|unable|not able)|i\s+can(?:'|no)t|i\s+cannot|unable to (?:provide|assess|determine)"
    r"|not able to (?:provide|assess|determine)|cannot provide)\b",
    re.IGNORECASE,
)


def is_refusal(raw_text: str) -> bool:
    """True for replies that decline to answer rather than answer badly."""
    return bool(_REFUSAL_RE.search(raw_text)) and "%" not in raw_text


class DeliveryVerdict(str, enum.Enum):
    OK = "ok"
    SUSPECT_NO_IMAGE = "suspect_no_image"


def verify_image_delivery(record: LlmRequestRecord, text_only_token_estimate: int,
                          image_token_floor: int = IMAGE_TOKEN_FLOOR) -> DeliveryVerdict:
    """Flag requests whose prompt token count shows no image was received."""
    if text_only_token_estimate <= 0:
        raise ValueError("text-only token estimate must be > 0")
    if record.prompt_tokens < text_only_token_estimate + image_token_floor:
        return DeliveryVerdict.SUSPECT_NO_IMAGE
    return DeliveryVerdict.OK
