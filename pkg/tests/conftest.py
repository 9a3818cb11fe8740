import hypothesis
import numpy as np
import pytest

from epicorrect.geometry import GridSpec

hypothesis.settings.register_profile("ci", max_examples=25, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[(5, 4), (5, 4, 3), (3, 2, 2)], ids=lambda m: "x".join(map(str, m)))
def small_grid(request):
    m = request.param
    h = (0.7, 1.3, 0.9)[: len(m)]
    return GridSpec(m, h)
