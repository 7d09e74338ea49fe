"""Description generation and grading through an external LLM service.

The service is a black box reached over JSON-over-HTTP. The wire format is
a single ``{"prompt": ...}`` request and a ``{"text": ...}`` response; a
provider adapter can reshape both for other APIs. Replies are expected to
contain a (possibly fenced, possibly slightly malformed) JSON object.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import urllib.error
import urllib.request
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any, Protocol

from .corpus import DescriptionLabel, SourceFunction

__all__ = [
    "GENERATION_TEMPLATE",
    "DISCRIMINATION_TEMPLATE",
    "ClientConfig",
    "LLMClient",
    "ProviderAdapter",
    "SimpleAdapter",
    "ServiceError",
    "ReplyParseError",
    "render_generation_prompt",
    "render_discrimination_prompt",
    "parse_json_reply",
    "llm_generate_description",
    "llm_grade_description",
    "filter_grades",
]

log = logging.getLogger(__name__)

GENERATION_TEMPLATE = """\
# Role
Imagine you are an experienced software developer.

# Task
The user will provide a source code function and its basic information each time.
Your task is to analyze its semantics and generate a comment to the function.
The comment should be a brief description of the function in one sentence.

# Rules
When you are generating the comment, please follow the rules below:

1. Comment should be accurate, precise, and helpful for code understanding.
2. You can refer to the original comments in the source code, but you cannot directly copy the original comments.
3. You also need to provide a Chinese version, which should have the same meaning as the English version.
4. You need to write comments into a JSON format string, for example:
```json
{{
    "en": "Brief description of the function in one sentence",
    "cn": "The chinese version of the description",
}}
```

# Input

Here is a source code from {path} file in the {project} {version} project:
```C/C++
{code}
```

You should generate a comment for the function named `{func_name}`.

Start generating
"""

DISCRIMINATION_TEMPLATE = """\
# Role
Imagine you are an experienced software developer and code reviewer.

# Task
The user will provide a C/C++ source code function and a generated natural language description (comment) for it.
Your task is to evaluate the quality of the generated description based on its accuracy, relevance, and conciseness.

# Rules
Please rate the description on a scale from A to D based on the following criteria:

- **A (Excellent)**: The description is accurate, precise, and captures the core functionality perfectly without errors.
- **B (Good)**: The description is generally accurate and helpful, but may miss minor details or contains slight redundancy.
- **C (Fair)**: The description is vague, too generic, or contains minor inaccuracies/irrelevant content.
- **D (Poor)**: The description is factually incorrect, completely irrelevant, hallucinations, or consists of meaningless repetition.

You need to write the evaluation result into a JSON format string:
```json
{{
    "score": "A", // Options: A, B, C, D
    "reason": "Brief explanation of the rating"
}}
```

# Input

Here is a source code from {path} file in the {project} {version} project:
```C/C++
{code}
```

The comment is generated for the function named `{func_name}`.

Here is the generated description:
```
{comment}
```

Start evaluating
"""

VALID_GRADES = ("A", "B", "C", "D")
KEPT_GRADES = frozenset({"A", "B"})


class ServiceError(RuntimeError):
    """The LLM endpoint could not be reached or kept failing."""


class ReplyParseError(ValueError):
    """The reply held no usable JSON object; ``raw`` keeps the reply text."""

    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}; raw reply: {raw[:200]!r}")
        self.raw = raw


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def _fields(fn: SourceFunction) -> dict[str, str]:
    return {"path": fn.path, "project": fn.project, "version": fn.version, "code": fn.code, "func_name": fn.name}


def render_generation_prompt(fn: SourceFunction) -> str:
    return GENERATION_TEMPLATE.format(**_fields(fn))


def render_discrimination_prompt(fn: SourceFunction, comment: str) -> str:
    return DISCRIMINATION_TEMPLATE.format(comment=comment, **_fields(fn))


# ---------------------------------------------------------------------------
# Reply parsing
# ---------------------------------------------------------------------------

_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def _strip_line_comments(text: str) -> str:
    """Drop ``//`` comments that sit outside JSON strings."""
    out = []
    for line in text.splitlines():
        in_str = False
        esc = False
        cut = len(line)
        for i, ch in enumerate(line):
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = not in_str
            elif not in_str and line.startswith("//", i):
                cut = i
                break
        out.append(line[:cut])
    return "\n".join(out)


def parse_json_reply(raw: str) -> dict[str, Any]:
    """Extract the first JSON object from a model reply.

    Tries each fenced block, then the outermost brace span. The template's
    own example carries a trailing comma and a ``//`` comment, so both are
    tolerated.
    """
    candidates = _FENCE.findall(raw)
    start, end = raw.find("{"), raw.rfind("}")
    if start != -1 and end > start:
        candidates.append(raw[start : end + 1])
    for text in candidates:
        cleaned = _TRAILING_COMMA.sub(r"\1", _strip_line_comments(text))
        try:
            obj = json.loads(cleaned)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ReplyParseError("no JSON object found in reply", raw)


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------


class ProviderAdapter(Protocol):
    def request_body(self, prompt: str) -> dict[str, Any]: ...

    def reply_text(self, body: Mapping[str, Any]) -> str: ...


class SimpleAdapter:
    """The native wire format: ``{"prompt"}`` in, ``{"text"}`` out."""

    def request_body(self, prompt: str) -> dict[str, Any]:
        return {"prompt": prompt}

    def reply_text(self, body: Mapping[str, Any]) -> str:
        text = body.get("text")
        if not isinstance(text, str):
            raise ReplyParseError("response body has no string 'text' field", json.dumps(body)[:500])
        return text


@dataclass
class ClientConfig:
    endpoint: str
    timeout: float = 60.0
    max_retries: int = 4
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    max_in_flight: int = 4
    headers: dict[str, str] = field(default_factory=dict)


def _http_post(url: str, body: dict[str, Any], headers: Mapping[str, str], timeout: float) -> dict[str, Any]:
    data = json.dumps(body).encode("utf-8")
    req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json", **headers}, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


class LLMClient:
    """Thread-safe client with bounded concurrency and capped exponential backoff.

    ``transport`` and ``sleep`` are injectable so retry behaviour can be
    tested without a network or real waiting.
    """

    def __init__(
        self,
        cfg: ClientConfig,
        adapter: ProviderAdapter | None = None,
        transport: Callable[[str, dict[str, Any], Mapping[str, str], float], dict[str, Any]] = _http_post,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if cfg.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.cfg = cfg
        self.adapter = adapter or SimpleAdapter()
        self._transport = transport
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)

    def backoff(self, attempt: int) -> float:
        return min(self.cfg.backoff_cap, self.cfg.backoff_base * 2.0**attempt)

    def complete(self, prompt: str) -> str:
        body = self.adapter.request_body(prompt)
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self.backoff(attempt - 1))
            try:
                with self._slots:
                    reply = self._transport(self.cfg.endpoint, body, self.cfg.headers, self.cfg.timeout)
            except urllib.error.HTTPError as exc:
                if exc.code < 500 and exc.code != 429:
                    raise ServiceError(f"{self.cfg.endpoint}: HTTP {exc.code}") from exc
                last = exc
                log.warning("LLM request failed (attempt %d): HTTP %d", attempt + 1, exc.code)
                continue
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
                log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                continue
            return self.adapter.reply_text(reply)
        raise ServiceError(f"{self.cfg.endpoint}: giving up after {self.cfg.max_retries + 1} attempts: {last}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def llm_generate_description(client: LLMClient, fn: SourceFunction) -> DescriptionLabel:
    raw = client.complete(render_generation_prompt(fn))
    obj = parse_json_reply(raw)
    en = obj.get("en")
    if not isinstance(en, str) or not en.strip():
        raise ReplyParseError("reply lacks a non-empty 'en' field", raw)
    cn = obj.get("cn")
    return DescriptionLabel(
        function_ref=fn.id,
        text_en=en.strip(),
        text_cn=cn.strip() if isinstance(cn, str) and cn.strip() else None,
        grade="ungraded",
        source="llm",
    )


def llm_grade_description(client: LLMClient, fn: SourceFunction, label: DescriptionLabel) -> tuple[str, str]:
    """Grade letter and the model's stated reason."""
    raw = client.complete(render_discrimination_prompt(fn, label.text_en))
    obj = parse_json_reply(raw)
    score = obj.get("score")
    if not isinstance(score, str) or score.strip().upper() not in VALID_GRADES:
        raise ReplyParseError(f"grade {score!r} is not one of A, B, C, D", raw)
    reason = obj.get("reason")
    return score.strip().upper(), reason if isinstance(reason, str) else ""


def filter_grades(labels: Iterable[DescriptionLabel]) -> list[DescriptionLabel]:
    """Keep only A- and B-graded descriptions."""
    return [d for d in labels if d.grade in KEPT_GRADES]
