from __future__ import annotations

import functools

import pytest

from tzcfi.harness import fixtures_dir, load_fixture
from tzcfi.rewriter import instrument_image

PROGRAM_FIXTURES = ["calls", "callback", "recursion", "irqcount", "overflow", "tamper"]
BENCH_FIXTURES = ["straight", "sparse", "light", "medium", "dense"]
ALL_FIXTURES = PROGRAM_FIXTURES + [f"bench/{n}" for n in BENCH_FIXTURES]


@functools.lru_cache(maxsize=None)
def original(name: str):
    return load_fixture(name)


@functools.lru_cache(maxsize=None)
def instrumented(name: str):
    return instrument_image(original(name))


def irq_schedule(name: str) -> str | None:
    path = fixtures_dir() / f"{name}.irq"
    return path.read_text() if path.exists() else None


@pytest.fixture(params=ALL_FIXTURES)
def fixture_name(request):
    return request.param
