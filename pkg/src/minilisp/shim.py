"""Locating the C runtime support header and deriving the unit ABI hash.

The header is the single source of truth for the tagged value layout that
natively compiled units use; its bytes take part in the hash so that a
unit built against one layout can never load into a runtime with another.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from . import __version__
from .primitives import registry_signature

SHIM_HEADER_NAME = "mln_shim.h"


def shim_header_path() -> Path | None:
    env = os.environ.get("MLN_SHIM_PATH")
    if env:
        p = Path(env)
        if p.is_file():
            return p
        if (p / SHIM_HEADER_NAME).is_file():
            return p / SHIM_HEADER_NAME
    here = Path(__file__).resolve()
    for base in (here.parents[2], here.parents[1]):
        candidate = base / "cshim" / SHIM_HEADER_NAME
        if candidate.is_file():
            return candidate
    return None


def shim_header_bytes() -> bytes:
    p = shim_header_path()
    if p is None:
        return b"<no-shim-header>"
    return p.read_bytes()


def compute_abi_hash() -> str:
    h = hashlib.sha256()
    h.update(("minilisp-" + __version__).encode())
    h.update(b"\x00")
    h.update(registry_signature().encode())
    h.update(b"\x00")
    h.update(shim_header_bytes())
    return h.hexdigest()
