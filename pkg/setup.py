import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("NEQ_NO_EXTENSION") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "neq._ckernels",
                    ["src/neq/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # contraction into FMA would break parity with the numpy fallback
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
