import os

from setuptools import Extension, setup

# The compiled convolution kernels are optional: without a working compiler
# the package falls back to the numpy implementation at import time.
ext_modules = []
if os.environ.get("FUSERET_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "fuseret.kernels._convnd",
            ["src/fuseret/kernels/_convnd.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
