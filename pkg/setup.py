import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - fallback-only install
    cythonize = None


def extensions():
    if cythonize is None or os.environ.get("DYNFILTER_NO_EXT"):
        return []
    ext = Extension(
        "dynfilter.kernels._ckernels",
        ["src/dynfilter/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        # no FMA contraction: compiled and numpy paths must round identically
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions())
