import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

openmp = [] if os.environ.get("SMKV_NO_OPENMP") else ["-fopenmp"]

ext_module = Extension(
    "smkv._kernels",
    ["src/smkv/_kernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-fno-fast-math", "-ffp-contract=off"] + openmp,
    extra_link_args=openmp,
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize(ext_module, language_level=3))
