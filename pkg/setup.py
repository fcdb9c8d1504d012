"""Build the optional Cython kernels.

The package works without them: ``eigeniris.kernels`` falls back to the
numpy implementations when the extension is not importable.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("EIGENIRIS_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "eigeniris._ckernels",
                    ["src/eigeniris/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
