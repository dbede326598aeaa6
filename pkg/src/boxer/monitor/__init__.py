"""Process monitor: the preloaded shim and helpers to build and inject it.

The shim is plain C compiled on first use with the system compiler and
cached by source hash, so a source edit always produces a fresh library.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
import tempfile
from importlib import resources
from typing import Dict, Optional, Tuple

# Everything the shim exports, grouped as control calls, name calls and file calls.
INTERCEPT_SURFACE: Tuple[str, ...] = (
    "socket", "bind", "listen", "accept", "accept4", "connect", "close",
    "getaddrinfo", "freeaddrinfo", "gethostbyname", "gethostbyname2", "gethostbyname_r",
    "gethostname", "uname",
    "open", "open64", "openat", "openat64", "__open_2", "__open64_2", "__openat_2",
    "__openat64_2", "fopen", "fopen64",
)

# Data-path and readiness calls the shim must never export.
FORBIDDEN = frozenset({
    "read", "write", "readv", "writev", "send", "sendto", "sendmsg", "recv", "recvfrom", "recvmsg",
    "sendfile", "splice", "poll", "ppoll", "select", "pselect", "epoll_wait", "epoll_pwait",
    "epoll_ctl", "epoll_create", "epoll_create1",
})

LIB_NAME = "libboxer_pm.so"


class ShimBuildError(RuntimeError):
    pass


def shim_source() -> str:
    return resources.files(__name__).joinpath("shim.c").read_text()


def cache_dir() -> str:
    base = os.environ.get("BOXER_CACHE") or os.path.join(
        os.environ.get("XDG_CACHE_HOME") or os.path.expanduser("~/.cache"), "boxer")
    return base


def shim_path(source: Optional[str] = None) -> str:
    src = shim_source() if source is None else source
    digest = hashlib.sha256(src.encode()).hexdigest()[:16]
    return os.path.join(cache_dir(), digest, LIB_NAME)


def build_shim(force: bool = False) -> str:
    """Compile the shim if needed and return the library path."""
    src = shim_source()
    out = shim_path(src)
    if os.path.exists(out) and not force:
        return out
    cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc") or shutil.which("clang")
    if cc is None:
        raise ShimBuildError("no C compiler found (set CC)")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with tempfile.TemporaryDirectory(dir=os.path.dirname(out)) as tmp:
        c_file = os.path.join(tmp, "shim.c")
        with open(c_file, "w") as fh:
            fh.write(src)
        tmp_out = os.path.join(tmp, LIB_NAME)
        cmd = [cc, "-shared", "-fPIC", "-O2", "-Wall", "-o", tmp_out, c_file, "-ldl", "-lpthread"]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise ShimBuildError(f"{' '.join(cmd)} failed:\n{proc.stderr}")
        # concurrent builders race harmlessly: rename is atomic
        os.replace(tmp_out, out)
    return out


def exported_symbols(lib: str) -> Tuple[str, ...]:
    """Dynamic function symbols defined by ``lib`` (via nm)."""
    nm = shutil.which("nm")
    if nm is None:
        raise ShimBuildError("nm not found")
    out = subprocess.run([nm, "-D", "--defined-only", lib], capture_output=True, text=True, check=True).stdout
    names = []
    for line in out.splitlines():
        parts = line.split()
        if len(parts) == 3 and parts[1] in ("T", "W"):
            names.append(parts[2].split("@")[0])
    return tuple(sorted(names))


def preload_env(lib: str, existing: Optional[str] = None) -> Dict[str, str]:
    """``LD_PRELOAD`` with the shim first, keeping any libraries already listed."""
    others = [p for p in (existing or "").replace(":", " ").split() if p and p != lib]
    return {"LD_PRELOAD": " ".join([lib] + others)}
