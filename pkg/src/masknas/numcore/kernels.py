"""Kernel backend selection.

``MASKNAS_KERNELS`` picks the implementation once at import:

* ``py``   - numpy fallback for everything.
* ``cy``   - compiled extension for everything (import fails if missing).
* ``auto`` (default) - hybrid: grouped/depthwise convolutions and pooling go
  to the compiled extension when it built, while dense convolutions stay on
  numpy, whose BLAS-backed contraction is several times faster there.  With
  no extension available auto falls back to numpy throughout.

The dispatch rule is fixed at import, so identical runs execute identical
code paths and stay byte-reproducible.
"""

from __future__ import annotations

import os

from . import _kernels_np

_choice = os.environ.get("MASKNAS_KERNELS", "auto").lower()
if _choice not in ("auto", "cy", "py"):
    raise ImportError(f"MASKNAS_KERNELS must be auto, cy or py, got {_choice!r}")

_ext = None
if _choice != "py":
    try:
        from . import _convkern as _ext  # type: ignore[no-redef]
    except ImportError:
        if _choice == "cy":
            raise

if _ext is None:
    BACKEND = "numpy"
elif _choice == "cy":
    BACKEND = "compiled"
else:
    BACKEND = "hybrid"

if BACKEND == "numpy":
    conv2d_fwd = _kernels_np.conv2d_fwd
    conv2d_bwd = _kernels_np.conv2d_bwd
    maxpool3_fwd = _kernels_np.maxpool3_fwd
    maxpool3_bwd = _kernels_np.maxpool3_bwd
    avgpool3_fwd = _kernels_np.avgpool3_fwd
    avgpool3_bwd = _kernels_np.avgpool3_bwd
elif BACKEND == "compiled":
    conv2d_fwd = _ext.conv2d_fwd
    conv2d_bwd = _ext.conv2d_bwd
    maxpool3_fwd = _ext.maxpool3_fwd
    maxpool3_bwd = _ext.maxpool3_bwd
    avgpool3_fwd = _ext.avgpool3_fwd
    avgpool3_bwd = _ext.avgpool3_bwd
else:
    def conv2d_fwd(x, w, stride, padding, dilation, groups):
        impl = _kernels_np if groups == 1 else _ext
        return impl.conv2d_fwd(x, w, stride, padding, dilation, groups)

    def conv2d_bwd(x, w, gy, stride, padding, dilation, groups):
        impl = _kernels_np if groups == 1 else _ext
        return impl.conv2d_bwd(x, w, gy, stride, padding, dilation, groups)

    maxpool3_fwd = _ext.maxpool3_fwd
    maxpool3_bwd = _ext.maxpool3_bwd
    avgpool3_fwd = _ext.avgpool3_fwd
    avgpool3_bwd = _ext.avgpool3_bwd
