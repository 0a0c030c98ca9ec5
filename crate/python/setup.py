"""Build shim: compiles the pamil-py cdylib with cargo and ships it as the
`pamil_py._native` extension module. Neither maturin nor setuptools-rust is
assumed; plain setuptools plus a cargo invocation is enough."""

import shutil
import subprocess
import sysconfig
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

HERE = Path(__file__).resolve().parent
MANIFEST = HERE.parent / "crates" / "py" / "Cargo.toml"
TARGET = HERE.parent / "target" / "release"


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        subprocess.run(
            ["cargo", "build", "--release", "--manifest-path", str(MANIFEST)],
            check=True,
        )
        built = TARGET / "libpamil_py_native.so"
        if not built.exists():  # macOS
            built = TARGET / "libpamil_py_native.dylib"
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)
        # For editable installs, also place the module next to the sources.
        suffix = sysconfig.get_config_var("EXT_SUFFIX")
        shutil.copy2(built, HERE / "pamil_py" / f"_native{suffix}")


setup(
    ext_modules=[Extension("pamil_py._native", sources=[])],
    cmdclass={"build_ext": CargoBuildExt},
)
