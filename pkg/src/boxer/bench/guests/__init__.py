"""Guest programs for the benchmarks. None of them import boxer."""

import hashlib
import os
import shutil
import subprocess
import tempfile
from importlib import resources

from ...monitor import cache_dir


def build_c_guest(name: str) -> str:
    """Compile ``<name>.c`` into the cache (keyed by source hash); return the binary path."""
    src = resources.files(__name__).joinpath(f"{name}.c").read_text()
    out = os.path.join(cache_dir(), "guests", hashlib.sha256(src.encode()).hexdigest()[:16], name)
    if os.path.exists(out):
        return out
    cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc")
    if cc is None:
        raise RuntimeError("no C compiler found (set CC)")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with tempfile.TemporaryDirectory(dir=os.path.dirname(out)) as tmp:
        c_file = os.path.join(tmp, f"{name}.c")
        with open(c_file, "w") as fh:
            fh.write(src)
        proc = subprocess.run([cc, "-O2", "-Wall", "-o", os.path.join(tmp, name), c_file],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"compiling {name}.c failed:\n{proc.stderr}")
        os.replace(os.path.join(tmp, name), out)
    return out
