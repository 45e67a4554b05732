"""Build script: compiles the optional fused-kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed compile downgrades to a pure-Python
install instead of failing.
"""

import sys

from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/gatedkd/kernels/_core.pyx"],
        language_level="3",
        compiler_directives={"boundscheck": False, "wraparound": False, "cdivision": True},
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"gatedkd: skipping compiled kernels ({exc}); numpy fallback will be used", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
