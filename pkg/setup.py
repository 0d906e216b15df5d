"""Build script for the optional compiled simulation core.

The Cython extension is optional: when Cython or a C compiler is missing the
package installs without it and ``mfbike.simulator`` falls back to the
pure-Python kernels.
"""
import os

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled core not built ({exc}); using pure-Python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: failed to build {ext.name} ({exc}); using pure-Python fallback")


def _extensions():
    src = os.path.join("src", "mfbike", "_simcore.pyx")
    if os.environ.get("MFBIKE_NO_EXT") or not os.path.exists(src):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "mfbike._simcore",
        [src],
        include_dirs=[np.get_include()],
        # no fused multiply-add: the fallback must reproduce results bit for bit
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
