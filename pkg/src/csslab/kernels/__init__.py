"""Backend dispatch for the hot numeric kernels.

Two interchangeable implementations live side by side: ``numpy_impl`` (the
reference, plain vectorized numpy) and ``numba_impl`` (jitted loops). The
active one is picked at import from the ``CSSLAB_KERNELS`` environment
variable:

    CSSLAB_KERNELS=auto    numba when importable, else numpy (default)
    CSSLAB_KERNELS=numba   require the jitted path, fail loudly otherwise
    CSSLAB_KERNELS=numpy   force the pure-numpy fallback

``use_backend`` switches at runtime (tests and the benchmark use it).
Within one backend, results are bit-reproducible run to run; across
backends they agree to float rounding, not bitwise.
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from . import numpy_impl

_IMPLS = {"numpy": numpy_impl}
try:
    from . import numba_impl

    _IMPLS["numba"] = numba_impl
except ImportError:  # numba genuinely absent
    numba_impl = None

_active = numpy_impl
backend_name = "numpy"


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_IMPLS))


def use_backend(name: str) -> str:
    """Select the kernel implementation; returns the resolved name."""
    global _active, backend_name
    if name == "auto":
        name = "numba" if "numba" in _IMPLS else "numpy"
    if name not in _IMPLS:
        raise ConfigError(
            f"kernel backend {name!r} unavailable; have {available_backends()}"
        )
    _active = _IMPLS[name]
    backend_name = name
    return name


def embed(X, W1, b1, W2, b2):
    return _active.embed(X, W1, b1, W2, b2)


def train_full(X, y, W1, b1, W2, b2, CW, cb):
    return _active.train_full(X, y, W1, b1, W2, b2, CW, cb)


def train_head(Z, y, CW, cb):
    return _active.train_head(Z, y, CW, cb)


def predict(Z, CW, cb):
    return _active.predict(Z, CW, cb)


def confusion_add(conf, y_true, y_pred):
    return _active.confusion_add(conf, y_true, y_pred)


def prototype_accumulate(sums, counts, Z, y):
    return _active.prototype_accumulate(sums, counts, Z, y)


use_backend(os.environ.get("CSSLAB_KERNELS", "auto"))
