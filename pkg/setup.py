from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "trajgpt.kernels._ext",
                sources=["src/trajgpt/kernels/_ext.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Pure-python fallback is selected at import time, so a missing
    # compiler toolchain only costs speed, never functionality.
    ext_modules = []

setup(ext_modules=ext_modules)
