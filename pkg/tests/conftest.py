from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from prefscope.dataset import Dataset, Label, PreferencePair

FROZEN = json.loads(Path(__file__).with_name("frozen_values.json").read_text())


@pytest.fixture
def frozen():
    return FROZEN


def make_dataset(y, *, annotators=None, groups=None, lengths=None, models=None, explanations=None,
                 labels=None, prefix="p") -> Dataset:
    """Minimal pairs carrying labels and metadata (texts are placeholders)."""
    n = len(y) if y is not None else len(labels)
    pairs = []
    for i in range(n):
        if labels is not None:
            label = labels[i]
        else:
            label = Label.A if y[i] else Label.B
        la, lb = (10, 10) if lengths is None else (10 + max(0, int(lengths[i])), 10 + max(0, -int(lengths[i])))
        pairs.append(PreferencePair(
            id=f"{prefix}{i:06d}",
            prompt=f"q{i}",
            response_a=f"a{i}",
            response_b=f"b{i}",
            label=label,
            annotator_id=None if annotators is None else str(annotators[i]),
            demographics=None if groups is None else {"group": str(groups[i])},
            explanation=None if explanations is None else explanations[i],
            model_a=None if models is None else models[i][0],
            model_b=None if models is None else models[i][1],
            word_count_a=la,
            word_count_b=lb,
        ))
    return Dataset(pairs=tuple(pairs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
