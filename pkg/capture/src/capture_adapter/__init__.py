"""Capture adapter: records model tool-decision runs into trace + EMB1
files that downstream analysis consumes."""

from .backends import FileScores, HttpScorer, MockSearchClient, StubModel
from .run import (
    CaptureConfig,
    CaptureSummary,
    capture_run,
    extract_hidden_states,
    read_task_file,
)

__all__ = [
    "CaptureConfig",
    "CaptureSummary",
    "FileScores",
    "HttpScorer",
    "MockSearchClient",
    "StubModel",
    "capture_run",
    "extract_hidden_states",
    "read_task_file",
]
