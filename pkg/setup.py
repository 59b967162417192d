import os

from setuptools import setup

ext_modules = []
if not os.environ.get("OPTBENCH_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "optbench._kernels",
                    ["src/optbench/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    # keep a*b - c*d unfused so both backends round identically
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
