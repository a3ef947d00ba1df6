"""Conv / pool kernel backend selection.

Two interchangeable backends (identical semantics, tie-breaking included):

* ``reference`` — numpy, convolution as shifted GEMMs through BLAS.
* ``_fast`` — compiled Cython loops.

``PROTOPYRAMID_KERNELS=python|cython`` forces one wholesale. The default
(``auto``) picks per kernel family based on what benchmarks show (see
``benchmarks/bench_kernels.py``): BLAS wins convolutions by a wide margin,
while the compiled pooling loop beats numpy's reshape/argmax dance.
``auto`` degrades to pure numpy when the extension is not built.
"""

import os

from . import reference

_choice = os.environ.get("PROTOPYRAMID_KERNELS", "auto")

if _choice not in ("auto", "python", "cython"):
    raise ValueError(f"PROTOPYRAMID_KERNELS must be auto|python|cython, got {_choice!r}")

_fast_impl = None
if _choice in ("auto", "cython"):
    try:
        from . import _fast as _fast_impl
    except ImportError:
        if _choice == "cython":
            raise

if _choice == "cython":
    _conv, _pool, BACKEND = _fast_impl, _fast_impl, "cython"
elif _choice == "auto" and _fast_impl is not None:
    _conv, _pool, BACKEND = reference, _fast_impl, "auto(numpy-conv+cython-pool)"
else:
    _conv, _pool, BACKEND = reference, reference, "python"

conv2d_forward = _conv.conv2d_forward
conv2d_backward_input = _conv.conv2d_backward_input
conv2d_backward_kernel = _conv.conv2d_backward_kernel
maxpool2d_forward = _pool.maxpool2d_forward
maxpool2d_backward = _pool.maxpool2d_backward


def compiled_available() -> bool:
    try:
        from . import _fast  # noqa: F401
    except ImportError:
        return False
    return True
