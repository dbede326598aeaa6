"""Filesystem name remapping for guest processes.

Rule files hold one rule per line::

    # comment
    exact  /etc/hosts  $BOXER_DIR/hosts
    prefix /var/data   /tmp/data

``$BOXER_DIR`` (and any other ``$VAR``) is expanded when the file is loaded.
"""

from __future__ import annotations

import os
import posixpath
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

RESOLV_CONF = "/etc/resolv.conf"


class RemapParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class RemapRule:
    match: str
    target: str
    mode: str  # "exact" | "prefix"

    def __post_init__(self):
        if self.mode not in ("exact", "prefix"):
            raise ValueError(f"unknown rule mode {self.mode!r}")
        for p in (self.match, self.target):
            if not posixpath.isabs(p):
                raise ValueError(f"path {p!r} is not absolute")


def normalize(path: str) -> str:
    """Collapse ``.``, ``..`` and duplicate slashes without touching the disk."""
    out = posixpath.normpath(path)
    # POSIX keeps a leading '//' as implementation-defined; we do not
    if out.startswith("//"):
        out = "/" + out.lstrip("/")
    return out


class RemapTable:
    """Immutable, ordered rule set with longest-match lookup."""

    def __init__(self, rules: Iterable[RemapRule] = ()):
        self.rules: Tuple[RemapRule, ...] = tuple(rules)
        exact: Dict[str, str] = {}
        prefix: Dict[str, str] = {}
        for rule in self.rules:
            key = normalize(rule.match)
            # later rules shadow earlier ones
            (exact if rule.mode == "exact" else prefix)[key] = normalize(rule.target)
        self._exact = exact
        self._prefix = prefix

    def remap(self, path: str) -> str:
        if not path.startswith("/"):
            return path
        norm = normalize(path)
        hit = self._exact.get(norm)
        if hit is not None:
            return hit
        # walk from the deepest ancestor up so the longest prefix wins
        probe = norm
        while True:
            target = self._prefix.get(probe)
            if target is not None:
                rest = norm[len(probe):]
                if probe == "/":
                    rest = norm
                return normalize(target + "/" + rest.lstrip("/")) if rest.strip("/") else target
            if probe == "/":
                return path
            probe = posixpath.dirname(probe)

    def __len__(self):
        return len(self.rules)


def builtin_rules(boxer_dir: str) -> List[RemapRule]:
    return [RemapRule(RESOLV_CONF, posixpath.join(boxer_dir, "resolv.conf"), "exact")]


def parse_rules(text: str, env: Optional[Mapping[str, str]] = None) -> List[RemapRule]:
    env = os.environ if env is None else env
    rules = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise RemapParseError(lineno, f"expected 'exact|prefix <match> <target>', got {raw.strip()!r}")
        mode, match, target = parts
        match, target = (_expand(p, env) for p in (match, target))
        if mode not in ("exact", "prefix"):
            raise RemapParseError(lineno, f"unknown mode {mode!r}")
        for p in (match, target):
            if not p.startswith("/"):
                raise RemapParseError(lineno, f"path {p!r} is not absolute")
        rules.append(RemapRule(match, target, mode))
    return rules


def _expand(token: str, env: Mapping[str, str]) -> str:
    # os.path.expandvars only reads os.environ
    out = token
    for key in sorted(env, key=len, reverse=True):
        out = out.replace("${%s}" % key, env[key]).replace("$" + key, env[key])
    return out


def load_rules(config_file: Optional[str], boxer_dir: str,
               env: Optional[Mapping[str, str]] = None) -> RemapTable:
    """Built-in resolver rule first, then the file's rules in order."""
    env = dict(os.environ if env is None else env)
    env["BOXER_DIR"] = boxer_dir
    rules = builtin_rules(boxer_dir)
    if config_file:
        with open(config_file) as fh:
            rules += parse_rules(fh.read(), env)
    return RemapTable(rules)
