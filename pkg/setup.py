"""Build hook for the optional compiled scheduler kernel.

The extension is marked optional: if no C toolchain (or Cython) is
available the install still succeeds and the scheduler falls back to the
pure-Python kernel at import time.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CELLKIT_PURE") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "cellkit.scheduler._kernel",
                    ["src/cellkit/scheduler/_kernel.pyx"],
                    optional=True,
                )
            ],
            language_level="3",
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
