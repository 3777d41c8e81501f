"""Build script for the optional compiled kernels.

The package is pure Python except for two hot loops (multi-source graph
distances and the per-vertex rigid fit) that live in a Cython extension.
If the extension cannot be built the install still succeeds and the
package falls back to the numpy implementations at import time.

Build in place for development with:

    python3 setup.py build_ext --inplace
"""

import sys

from setuptools import setup


def get_extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools.extension import Extension
    except ImportError:
        return []

    ext = Extension(
        "chain4d._kernels._ext",
        sources=["src/chain4d/_kernels/_ext.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


try:
    setup(ext_modules=get_extensions())
except SystemExit:
    raise
except Exception as exc:  # noqa: BLE001 - any compiler failure degrades to pure python
    print("warning: compiled kernels unavailable (%s), installing pure python" % exc,
          file=sys.stderr)
    setup(ext_modules=[])
