"""Shared fixtures and record builders."""

from __future__ import annotations

import numpy as np
import pytest

from stripsearch.corpus import Corpus, FunctionRecord, ingest_binary


def make_record(
    fid: str,
    pseudocode: str = "int f()\n{\n  return 0;\n}",
    *,
    address: int = 0,
    name_symbol: str | None = None,
    callee_ids: list[str] | None = None,
    binary_id: str = "bin",
    source_id: str | None = None,
    loc: int | None = None,
    is_thunk: bool = False,
    is_virtual: bool = False,
) -> FunctionRecord:
    return FunctionRecord(
        id=fid,
        binary_id=binary_id,
        address=address,
        pseudocode=pseudocode,
        name_symbol=name_symbol,
        callee_ids=list(callee_ids or []),
        loc=len(pseudocode.splitlines()) if loc is None else loc,
        is_thunk=is_thunk,
        is_virtual=is_virtual,
        source_id=source_id,
    )


def string_body(n_strings: int, n_other: int) -> str:
    """Pseudocode-ish text with an exact number of string and non-string tokens."""
    parts = ['"s%d"' % i for i in range(n_strings)] + ["x"] * n_other
    return " ".join(parts)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_binary() -> Corpus:
    """One binary: a stripped target calling a named helper, a stripped helper and an import."""
    rows = [
        {
            "id": "b:1000",
            "binary_id": "b",
            "address": 0x1000,
            "pseudocode": (
                "__int64 __fastcall sub_1000(__int64 a1)\n{\n"
                "  xtea_encode(a1, 32);\n  sub_2000(a1);\n  return memcpy(a1, 0, 8);\n}"
            ),
        },
        {
            "id": "b:1800",
            "binary_id": "b",
            "address": 0x1800,
            "pseudocode": 'int __fastcall xtea_encode(int *v, int n)\n{\n  puts("xtea round");\n  return n;\n}',
        },
        {
            "id": "b:2000",
            "binary_id": "b",
            "address": 0x2000,
            "pseudocode": "__int64 __fastcall sub_2000(__int64 a1)\n{\n  return a1 + 1;\n}",
        },
    ]
    return Corpus(ingest_binary(rows))
