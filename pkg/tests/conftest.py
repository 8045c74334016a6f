from __future__ import annotations

import numpy as np
import pytest

from robustmil.synth import GeneratorConfig, generate_cohort


def tiny_config(**kw) -> GeneratorConfig:
    base = dict(n_patients=12, tiles_per_scan=16, feature_dim=8, biology_dim=4, seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture
def tiny_ds():
    return generate_cohort(tiny_config())


@pytest.fixture
def tiny_ds_all_scanners():
    return generate_cohort(tiny_config(scans_per_patient=None, seed=4, id_prefix="Q"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed in the terminal summary
VERDICTS: dict[int, str] = {}


def record_verdict(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
