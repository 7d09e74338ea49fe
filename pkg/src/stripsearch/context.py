"""Callee context selection for the reranking stage.

Functions are ranked by an informative score built from three signals: a
surviving name symbol, the share of string-literal tokens, and how many of
the function's callees are named. The top-k direct callees are appended to
the target pseudocode when assembling reranker input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .corpus import EXTERNAL_PREFIX, STRIPPED_NAME_PATTERN, FunctionRecord, count_tokens, is_stripped_name

__all__ = [
    "MODES",
    "DEFAULT_BUDGET",
    "ScoreParams",
    "ContextBundle",
    "OutOfContextError",
    "zero_centered_sigmoid",
    "name_indicator",
    "string_density",
    "informative_score",
    "select_context",
    "assemble_input",
]

MODES = ("heuristic", "random", "none")
DEFAULT_BUDGET = 16_384
_SIGMOID_CEILING = math.nextafter(1.0, 0.0)
_SCORE_CEILING = math.nextafter(3.0, 0.0)


class RecordSource(Protocol):
    def get(self, fid: str) -> FunctionRecord | None: ...


@dataclass(frozen=True)
class ScoreParams:
    beta: float = 15.0
    k: int = 5

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ContextBundle:
    target: FunctionRecord
    selected: list[tuple[FunctionRecord, float]] = field(default_factory=list)
    mode: str = "heuristic"
    k: int = 5

    def to_json(self) -> dict[str, Any]:
        return {
            "target": self.target.id,
            "mode": self.mode,
            "k": self.k,
            "selected": [{"id": rec.id, "score": score} for rec, score in self.selected],
        }


class OutOfContextError(ValueError):
    """Query plus target pseudocode alone exceed the token budget."""


def zero_centered_sigmoid(x: float) -> float:
    """2 / (1 + e^-x) - 1, i.e. tanh(x / 2); kept strictly below 1."""
    return min(math.tanh(x / 2.0), _SIGMOID_CEILING)


def name_indicator(f: FunctionRecord | str, stripped_pattern: str = STRIPPED_NAME_PATTERN) -> int:
    """1 if the function keeps a real name.

    Accepts a record or an ``ext:<name>`` reference; imports keep their
    names unless the name is itself a placeholder.
    """
    if isinstance(f, str):
        if not f.startswith(EXTERNAL_PREFIX):
            raise ValueError(f"not an external reference: {f!r}")
        return 0 if is_stripped_name(f[len(EXTERNAL_PREFIX) :], stripped_pattern) else 1
    return 0 if f.name_symbol is None else 1


def string_density(f: FunctionRecord) -> float:
    if not f.tokens:
        return 0.0
    return sum(1 for t in f.tokens if t.kind == "string") / len(f.tokens)


def _callee_term(f: FunctionRecord, corpus: RecordSource) -> float:
    if not f.callee_ids:
        return 0.0
    named = 0
    for ref in f.callee_ids:
        if ref.startswith(EXTERNAL_PREFIX):
            named += name_indicator(ref)
        else:
            rec = corpus.get(ref)
            named += 0 if rec is None else name_indicator(rec)
    return named / len(f.callee_ids)


def informative_score(f: FunctionRecord, corpus: RecordSource, params: ScoreParams = ScoreParams()) -> float:
    """Name indicator plus squashed string density plus named-callee fraction.

    The string term is below 1 but can sit within one ulp of it, and adding
    two exact 1s would then round up to 3; the sum is clamped to stay below.
    """
    total = (
        name_indicator(f)
        + zero_centered_sigmoid(params.beta * string_density(f))
        + _callee_term(f, corpus)
    )
    return min(total, _SCORE_CEILING)


def select_context(
    target: FunctionRecord,
    corpus: RecordSource,
    params: ScoreParams = ScoreParams(),
    mode: str = "heuristic",
    seed: int = 0,
) -> ContextBundle:
    """Pick up to k direct callees of ``target`` as reranking context.

    Only callees whose pseudocode is in the corpus can be selected;
    externals still count toward the target's own score but never enter
    the bundle. ``none`` returns without touching any callee record.
    """
    if mode not in MODES:
        raise ValueError(f"unknown context mode {mode!r}; expected one of {MODES}")
    bundle = ContextBundle(target=target, mode=mode, k=params.k)
    if mode == "none":
        return bundle

    internal = []
    for ref in target.callee_ids:
        if ref.startswith(EXTERNAL_PREFIX) or ref == target.id:
            continue
        rec = corpus.get(ref)
        if rec is not None:
            internal.append(rec)

    if mode == "heuristic":
        scored = [(rec, informative_score(rec, corpus, params)) for rec in internal]
        scored.sort(key=lambda item: (-item[1], item[0].address, item[0].id))
        bundle.selected = scored[: params.k]
    else:
        rng = np.random.default_rng(seed)
        count = min(params.k, len(internal))
        picks = rng.choice(len(internal), size=count, replace=False) if count else []
        bundle.selected = [(internal[i], informative_score(internal[i], corpus, params)) for i in picks]
    return bundle


_TARGET_HEADER = "### target"


def assemble_input(query: str, bundle: ContextBundle, budget: int = DEFAULT_BUDGET) -> str:
    """Lay out query, target and whole callees within ``budget`` tokens.

    Callees are added in bundle order; packing stops at the first callee
    that would overflow, so no function is ever cut in half. Piece counts
    are summed, which can only overestimate the joined text's count (a
    block comment is the one token able to swallow a line break).
    """
    target = bundle.target
    used = count_tokens(query) + count_tokens(_TARGET_HEADER) + len(target.tokens)
    if used > budget:
        raise OutOfContextError(f"query and target {target.id} need {used} tokens, budget is {budget}")
    parts = [query, _TARGET_HEADER, target.pseudocode]
    for rec, _ in bundle.selected:
        header = f"### callee {rec.id}"
        cost = count_tokens(header) + len(rec.tokens)
        if used + cost > budget:
            break
        used += cost
        parts.extend((header, rec.pseudocode))
    return "\n".join(parts)
