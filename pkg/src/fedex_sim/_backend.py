"""Select the gradient-kernel backend at import time.

The compiled extension is preferred when it built; FEDEX_SIM_PURE=1 forces the
pure-numpy fallback (used by the benchmark and by tests that compare the two).
"""

from __future__ import annotations

import os

if os.environ.get("FEDEX_SIM_PURE", "0").strip() not in ("", "0"):
    from . import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as kernels  # type: ignore[no-redef]

        BACKEND = "python"
