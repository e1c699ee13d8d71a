import os
import time
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 120-event synthetic root taken through detect-turns and preprocess."""
    from gazevit import pipeline
    from gazevit.synth import SynthSpec, generate_synthetic_dataset

    root = tmp_path_factory.mktemp("small") / "data"
    generate_synthetic_dataset(SynthSpec(n_samples=120), seed=3, root=root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pipeline.detect_turns(root)
        pipeline.build_fixmaps(root)
        pipeline.preprocess(root)
    return root


_ACCEPTANCE = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}  {self.title}  ({elapsed:.1f} s)"
        if self.detail:
            line += f"  {self.detail}"
        if exc_type is not None:
            line += f"  [{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        _ACCEPTANCE.append((self.number, line))
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line; set ``c.detail`` for numbers."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE, key=lambda x: x[0]):
            terminalreporter.write_line(line)
