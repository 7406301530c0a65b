from setuptools import Extension, setup

# The compiled convolution kernels are optional: without Cython (or a C
# compiler) the package installs pure-Python and toepnmf.engine falls back
# to the NumPy kernels at import time.
try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "toepnmf.engine._kernels",
                ["src/toepnmf/engine/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
