import numpy as np
import pytest

from structsa import backend
from structsa.attention import SAWeights


@pytest.fixture(autouse=True)
def clean_backend_state(monkeypatch):
    """Keep backend selection and thread settings from leaking between tests."""
    monkeypatch.delenv("STRUCTSA_BACKEND", raising=False)
    monkeypatch.delenv("STRUCTSA_THREADS", raising=False)
    backend.set_backend(None)
    yield
    backend.set_backend(None)


@pytest.fixture(params=sorted(backend.available()))
def each_backend(request):
    """Run a test once per installed kernel backend."""
    with backend.using(request.param):
        yield request.param


def make_base(rng, channels, scale=1.0, dtype=np.float64):
    def draw():
        return rng.uniform(-1.0, 1.0, size=(channels, channels)).astype(dtype)

    return SAWeights(draw(), draw(), draw(), scale=scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
