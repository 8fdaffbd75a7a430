"""Build script for the optional compiled kernel extension.

The package works without the extension: ``entmod.backend`` falls back to
the pure-numpy kernels when ``entmod._fastops`` is missing, so the
extension is marked optional and a failed compile does not break install.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "entmod._fastops",
                ["src/entmod/_fastops.pyx"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
    for ext in ext_modules:
        ext.optional = True
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
