"""Shared fixtures plus a per-criterion summary for the acceptance suite."""

import numpy as np
import pytest

from aeroadapt.backbone import NoiseSchedule, ToyBackbone

# Criterion label per test-name prefix in test_acceptance.py; the terminal
# summary prints one PASS/FAIL line for each.
ACCEPTANCE_LABELS = {
    "c01": "AdaIN moment matching (means/stds vs style, 1e-6, <1s)",
    "c02": "Cross-attention matches dense oracle (1e-10; rows sum to 1, 1e-9)",
    "c03": "Prototype optimality + gradient-ascent agreement (1e-6, <10s)",
    "c04": "One-step refinement exactness (oracle 1e-9; null predictor exact)",
    "c05": "Annotation preservation through GST/LR; HR removes exactly as planned",
    "c06": "Frechet distance closed forms (identical/1-D/diagonal, 1e-8)",
    "c07": "mAP evaluator hand case (1.0 / 0.3 exact) + score-rescale invariance",
    "c08": "Softmax retention laws + Monte-Carlo argmax frequency",
    "c09": "Blend endpoints bitwise; background mode preserves mask interiors",
    "c10": "End-to-end toy run deterministic (byte-identical, <60s)",
}

_acceptance_results: dict[str, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def toy_backbone():
    return ToyBackbone()


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.linear()


def _criterion_key(nodeid: str) -> str | None:
    if "test_acceptance.py" not in nodeid:
        return None
    name = nodeid.rsplit("::", 1)[-1]
    for key in ACCEPTANCE_LABELS:
        if name.startswith(f"test_{key}"):
            return key
    return None


def pytest_runtest_logreport(report):
    key = _criterion_key(report.nodeid)
    if key is None:
        return
    if report.when == "call":
        _acceptance_results[key] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.failed:
        _acceptance_results[key] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(ACCEPTANCE_LABELS):
        outcome = _acceptance_results.get(key, "NOT RUN")
        terminalreporter.write_line(f"[{outcome}] criterion {key[1:]}: {ACCEPTANCE_LABELS[key]}")
