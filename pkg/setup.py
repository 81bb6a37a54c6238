import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("XNET_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "xnet.backends._fastcore",
                    sources=["src/xnet/backends/_fastcore.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # no cython at build time: install as pure python, the numpy
        # fallback backend is selected at import
        ext_modules = []

setup(ext_modules=ext_modules)
