"""Backend selection for the row-wise kernels.

The compiled extension is used when it has been built; otherwise the numpy
fallback is loaded. Set ``VIDTEXT_KERNELS=python`` to force the fallback.
"""
import importlib
import os

_NAMES = {"compiled": "vidtext._ckernels", "python": "vidtext._pykernels"}

_impl = None


def available_backends():
    found = []
    for name, mod in _NAMES.items():
        try:
            importlib.import_module(mod)
        except ImportError:
            continue
        found.append(name)
    return found


def set_backend(name):
    """Switch every kernel to ``name`` ("compiled" or "python")."""
    global _impl
    if name not in _NAMES:
        raise ValueError(f"unknown kernel backend {name!r}")
    _impl = importlib.import_module(_NAMES[name])
    g = globals()
    for fn in (
        "softmax_rows",
        "softmax_rows_backward",
        "log_softmax_rows",
        "log_softmax_rows_backward",
        "layer_norm_rows",
        "layer_norm_rows_backward",
        "gelu",
        "gelu_backward",
    ):
        g[fn] = getattr(_impl, fn)


def backend():
    return _impl.BACKEND


def _select():
    wanted = os.environ.get("VIDTEXT_KERNELS", "").strip().lower()
    if wanted:
        set_backend(wanted)
        return
    try:
        set_backend("compiled")
    except ImportError:
        set_backend("python")


_select()
