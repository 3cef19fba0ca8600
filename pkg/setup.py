"""Build the optional compiled attention kernel; the package works without it."""

import os
import sys

from setuptools import setup

ext_modules = []
if not os.environ.get("BREEN_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "breen._ckernels",
                    ["src/breen/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3", "-ffast-math"],
                    # glibc vector math library provides the vectorized exp
                    libraries=["mvec", "m"] if sys.platform.startswith("linux") else [],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    optional=True,
                )
            ],
            quiet=True,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
