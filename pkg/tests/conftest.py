import numpy as np
import pytest

from ventriq.config import Config
from ventriq.io import CohortManifest
from ventriq.models import train_models
from ventriq.phantom import PhantomSpec, generate_cohort

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
CRITERIA = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    CRITERIA[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def subset(manifest: CohortManifest, ids) -> CohortManifest:
    ids = set(ids)
    return CohortManifest(tuple(s for s in manifest.subjects if s.subject_id in ids))


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """12 training + 4 test phantom subjects on disk."""
    out = tmp_path_factory.mktemp("small_cohort")
    manifest, truth = generate_cohort(PhantomSpec(n_subjects=16, seed=11), out)
    return out, manifest, truth


@pytest.fixture(scope="session")
def small_models(small_cohort):
    _, manifest, _ = small_cohort
    ids = [s.subject_id for s in manifest.subjects[:12]]
    cfg = Config(n_trees=20)
    return train_models(subset(manifest, ids), cfg)


@pytest.fixture(scope="session")
def small_test_manifest(small_cohort):
    _, manifest, _ = small_cohort
    return subset(manifest, [s.subject_id for s in manifest.subjects[12:]])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
