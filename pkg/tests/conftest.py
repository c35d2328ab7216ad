import os

import numpy as np
import pytest
import torch

from nowcastlab.datamodel import AUX_VARIABLES, N_INPUT_FRAMES, N_TARGET_FRAMES, Sample

torch.set_num_threads(int(os.environ.get("NOWCASTLAB_THREADS", torch.get_num_threads())))

# acceptance criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS = {}


def random_sample(rng, size=(16, 16), seq=0, start=0, wet=True):
    h, w = size
    scale = 5.0 if wet else 0.0
    return Sample(
        rng.random((N_INPUT_FRAMES, h, w)).astype(np.float32) * scale,
        rng.random((N_TARGET_FRAMES, h, w)).astype(np.float32) * scale,
        rng.random((len(AUX_VARIABLES), N_INPUT_FRAMES, h, w)).astype(np.float32),
        sequence_id=seq,
        window_start=start,
        start_hour=float(start),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
