"""Build script for the optional compiled ANN kernels.

The package works without the extension (a numpy fallback is selected at
import time), so a missing compiler or Cython only downgrades performance.
"""

import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the graph kernels if possible; otherwise install pure-Python."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing entirely
            warnings.warn(f"skipping compiled ANN kernels: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"failed to build {ext.name}, using numpy fallback: {exc}")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:
        warnings.warn(f"Cython/numpy unavailable at build time: {exc}")
        return []
    ext = Extension(
        "condret.ann._graph_c",
        ["src/condret/ann/_graph_c.pyx"],
        language="c++",
        extra_compile_args=["-O3", "-std=c++11"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
