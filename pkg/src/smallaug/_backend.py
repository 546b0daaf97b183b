"""Select the compiled kernels when available, else the numpy fallback.

Set ``SMALLAUG_BACKEND=python`` to force the fallback.
"""

import importlib
import os

from smallaug import _pykernels

python_kernels = _pykernels

if os.environ.get("SMALLAUG_BACKEND", "").lower() == "python":
    compiled_kernels = None
else:
    try:
        compiled_kernels = importlib.import_module("smallaug._kernels")
    except ImportError:
        compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "cython" if compiled_kernels is not None else "python"
