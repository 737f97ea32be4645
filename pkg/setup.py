import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; grnet falls back to the numpy kernels
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("GRNET_NO_EXT"):
    extensions = [
        Extension(
            "grnet._kernels",
            ["src/grnet/_kernels.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            optional=True,
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
