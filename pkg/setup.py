import numpy as np
from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "hiret.ann._graph_fast",
                ["src/hiret/ann/_graph_fast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    # No Cython available: install the pure-Python kernel only. The package
    # selects the fallback at import time.
    pass

setup(ext_modules=ext_modules)
