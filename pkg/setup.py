"""Build script: compiles the hinge-sweep kernel when Cython and a C compiler
are available, otherwise installs the pure-Python package unchanged (the
regression module falls back to the numpy kernel at import time)."""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "hestonbounds._mars_fast",
                ["src/hestonbounds/_mars_fast.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
