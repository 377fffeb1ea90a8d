import numpy as np
import pytest

from toolsense.synth import ScoreBlock, SynthConfig, block_fixture
from toolsense.traces import TraceRecord, TraceSet

# Need region carries 177 positive / 2 negative / 169 neutral instances
# (positive rate 177/348); the High row splits 52 negative / 152 neutral.
GRID_CELL_COUNTS = (
    (80, 90, 60),
    (2, 89, 27),
    (20, 32, 152),
)
GRID_N = 552

# 500 records engineered to mean No-Tool 0.61, mean Always-Tool 0.78,
# 300 positive-gain instances, per-instance maxima averaging 0.83, and
# exactly 152 self-calls.
AGGREGATE_BLOCKS = (
    ScoreBlock(count=300, s_no_tool=0.45, s_always_tool=245.0 / 300.0, called=152),
    ScoreBlock(count=200, s_no_tool=0.85, s_always_tool=0.725, called=0),
)


@pytest.fixture
def aggregate_trace() -> TraceSet:
    return block_fixture(AGGREGATE_BLOCKS, seed=7)


@pytest.fixture
def grid_config() -> SynthConfig:
    return SynthConfig(n=GRID_N, cell_counts=GRID_CELL_COUNTS, with_embeddings=False)


def make_records(pairs, called=None, perceived=None) -> TraceSet:
    """Small hand-rolled trace: pairs of (s_no_tool, s_always_tool)."""
    records = []
    for i, (s_nt, s_at) in enumerate(pairs):
        c = bool(called[i]) if called is not None else False
        answers = perceived[i] if perceived is not None else {}
        records.append(TraceRecord(
            instance_id=f"r{i:03d}", seq_index=i, task_name="t", model_id="m",
            s_no_tool=float(s_nt), s_always_tool=float(s_at),
            self_called=c, self_call_count=1 if c else 0,
            perceived_need=answers,
        ))
    return TraceSet.from_records(records)


def random_grid_scores(rng: np.random.Generator, n: int) -> np.ndarray:
    """Scores on the 1/64 grid: every pairwise difference and every subset
    sum of differences is exactly representable, so brute-force comparisons
    can require bitwise equality."""
    return rng.integers(0, 65, size=n) / 64.0
