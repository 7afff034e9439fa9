import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rmoe._kernels._core",
                ["src/rmoe/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # fp-contract off: the optimizer kernels must match the
                # numpy backend bitwise, so no fused multiply-adds
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

# The package must stay importable without a compiler; the numpy backend is a
# full drop-in replacement selected at import time.
for ext in ext_modules:
    ext.optional = True

setup(ext_modules=ext_modules)
