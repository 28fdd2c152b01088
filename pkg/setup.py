import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FREEDFML_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "freedfml._ckernels",
                    ["src/freedfml/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # numpy fallback kernels are used at runtime
        ext_modules = []

setup(ext_modules=ext_modules)
