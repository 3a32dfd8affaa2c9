import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("EXAMCHAIN_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "examchain._kernels",
                    ["src/examchain/_kernels.pyx"],
                    libraries=["crypto"],
                    extra_compile_args=["-O3", "-Wno-deprecated-declarations"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
