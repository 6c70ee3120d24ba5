import pytest

from atlmetric import _kernels, _pykernels

try:
    from atlmetric import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels, "cython": _ckernels}


@pytest.fixture(params=sorted(BACKENDS))
def backend(request, monkeypatch):
    """Route ``atlmetric._kernels`` through one backend for the test."""
    impl = BACKENDS[request.param]
    if impl is None:
        pytest.skip("compiled kernels not built")
    monkeypatch.setattr(_kernels, "topk_neighbors", impl.topk_neighbors)
    monkeypatch.setattr(_kernels, "triplet_hinge", impl.triplet_hinge)
    return impl
