"""Build script for the optional compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile should degrade to a pure-Python install
rather than abort it.
"""

import os
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    compile_args = ["-O3"]
    link_args = []
    if sys.platform.startswith("linux"):
        compile_args.append("-fopenmp")
        link_args.append("-fopenmp")

    ext_modules = cythonize(
        [
            Extension(
                "mobileone._convkernels",
                ["src/mobileone/_convkernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError as exc:  # pragma: no cover - build environment dependent
    if os.environ.get("MOBILEONE_REQUIRE_EXT"):
        raise
    print(f"building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
