import pytest

from prgnn.data import CohortConfig, generate_cohort


@pytest.fixture(scope="session")
def fixture_graphs():
    """The reference cohort: seed 7, 40 + 40 subjects, 10 augmentations, 84 nodes."""
    return generate_cohort(CohortConfig(seed=7))
