"""Build script for the optional compiled evaluation kernel.

The package is pure Python except for one Cython extension,
``odesym._core``, which accelerates the candidate scoring loop of the
symmetry search.  If no C compiler is available the build falls back to
a pure-Python/NumPy kernel selected at import time, so the extension is
strictly optional.
"""

import sys

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "odesym._core",
                sources=["src/odesym/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: building without compiled kernel ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
