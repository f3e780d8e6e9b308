import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: the C kernels must produce bit-identical results to the
# numpy fallback, so FMA contraction (which changes rounding) is disabled.
# -fno-builtin-sin/-cos: stops gcc from fusing adjacent sin/cos calls into
# glibc sincos, which rounds differently from the separate calls the Python
# twin makes (1-ulp divergence in the Box-Muller cache otherwise).
setup(
    ext_modules=cythonize(
        [
            Extension(
                "sleb._core",
                ["src/sleb/_core.pyx"],
                extra_compile_args=[
                    "-O3",
                    "-ffp-contract=off",
                    "-fno-builtin-sin",
                    "-fno-builtin-cos",
                ],
                language="c",
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
)
