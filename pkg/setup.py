import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PKN_NO_EXTENSION"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "pkn._backend._core",
                ["src/pkn/_backend/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
