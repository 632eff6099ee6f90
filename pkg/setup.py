import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The packing kernels are optional at runtime: softseg falls back to the
# NumPy implementation when the extension is absent. SOFTSEG_SKIP_EXT=1
# skips compilation entirely (pure-Python install).
ext_modules = []
if cythonize is not None and not os.environ.get("SOFTSEG_SKIP_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "softseg._imcol",
                sources=["src/softseg/_imcol.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
