"""Hot inner loops, jitted with numba when available.

Set ``TILETRAIN_DISABLE_NUMBA=1`` to force the pure-numpy path. The choice
is made once at import time; ``load_backend`` returns either implementation
explicitly for tests and benchmarks.
"""
import importlib
import logging
import os

log = logging.getLogger(__name__)

KERNELS = ("conv_valid", "wgrad_valid", "maxpool_valid", "maxpool_scatter")


class _Backend:
    def __init__(self, name, module):
        self.name = name
        for attr in KERNELS:
            setattr(self, attr, getattr(module, attr))

    def __repr__(self):
        return f"<kernel backend {self.name}>"


def load_backend(name):
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return _Backend(name, importlib.import_module(f"{__name__}._{name}"))


def _select():
    if os.environ.get("TILETRAIN_DISABLE_NUMBA", "").strip() not in ("", "0"):
        return load_backend("numpy")
    try:
        return load_backend("numba")
    except ImportError:
        log.warning("numba unavailable, using pure-numpy kernels")
        return load_backend("numpy")


backend = _select()
BACKEND = backend.name
conv_valid = backend.conv_valid
wgrad_valid = backend.wgrad_valid
maxpool_valid = backend.maxpool_valid
maxpool_scatter = backend.maxpool_scatter
