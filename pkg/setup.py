"""Builds the optional compiled splatting kernel.

Without a C compiler or Cython the package still installs and falls back to
the numpy implementation in ``pcqa._splat_py``.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("PCQA_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("pcqa._splat", ["src/pcqa/_splat.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
