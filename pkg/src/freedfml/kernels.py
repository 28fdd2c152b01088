"""Kernel backend selection.

The compiled extension is preferred; set ``FREEDFML_PURE=1`` to force the
numpy fallback (the test-suite checks both agree).
"""

import os

if os.environ.get("FREEDFML_PURE") == "1":
    from ._kernels_py import (  # noqa: F401
        cross_entropy_fwd_bwd, fnv1a64, kl_grads, kl_rows, log_softmax_rows, softmax_rows,
    )
    BACKEND = "python"
else:
    try:
        from ._ckernels import (  # noqa: F401
            cross_entropy_fwd_bwd, fnv1a64, kl_grads, kl_rows, log_softmax_rows, softmax_rows,
        )
        BACKEND = "cython"
    except ImportError:
        from ._kernels_py import (  # noqa: F401
            cross_entropy_fwd_bwd, fnv1a64, kl_grads, kl_rows, log_softmax_rows, softmax_rows,
        )
        BACKEND = "python"
