"""Build the optional compiled core.

If Cython or a C compiler is unavailable the package still installs and runs
on the pure-Python backend.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("VECPOOL_NO_EXT") != "1" and sys.platform.startswith("linux"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "vecpool._core",
                    ["src/vecpool/_core.pyx"],
                    include_dirs=[np.get_include(), "src/vecpool"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # keep FP results bitwise equal to the pure-Python envs
                    extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
                    libraries=["pthread"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
