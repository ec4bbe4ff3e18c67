"""The .mln container and the load/unload lifecycle.

One format serves both execution paths: a unit is either serialized
LIMPLE (run by the register VM) or a reference to a natively compiled
shared object.  Every file is signed at compile time; the signature
covers the constants text and the payload, so any corruption or an ABI
drift between compiler and runtime rejects the load before the
environment is touched.
"""

from __future__ import annotations

import hashlib
import os
import struct

from .limple import CompUnit, deserialize_unit, serialize_unit
from .objects import NIL, MiniLispError, Symbol, read
from .primitives import ExecState
from .shim import compute_abi_hash

MAGIC = b"MLN1"
FORMAT_VERSION = 1
KIND_LIMPLE = 0
KIND_NATIVE = 1


class MlnError(MiniLispError):
    error_class = "mln-error"


class LiveReferenceError(MiniLispError):
    error_class = "live-references"

    def __init__(self, message, names):
        super().__init__(message)
        self.names = names


def _signature(abi_hash: str, kind: int, constants_text: bytes,
               payload: bytes) -> bytes:
    h = hashlib.sha256()
    h.update(abi_hash.encode())
    h.update(bytes([kind]))
    h.update(constants_text)
    h.update(payload)
    return h.hexdigest().encode("ascii")


def write_mln_bytes(kind: int, abi_hash: str, constants_text: str,
                    payload: bytes) -> bytes:
    const_b = constants_text.encode("utf-8")
    sig = _signature(abi_hash, kind, const_b, payload)
    out = [MAGIC,
           struct.pack("<I", FORMAT_VERSION),
           struct.pack("<I", len(sig)), sig,
           bytes([kind]),
           struct.pack("<Q", len(const_b)), const_b,
           struct.pack("<Q", len(payload)), payload]
    return b"".join(out)


def unit_to_mln_bytes(unit: CompUnit) -> bytes:
    payload = serialize_unit(unit)
    return write_mln_bytes(KIND_LIMPLE, unit.abi_hash,
                           unit.constants_text(), payload)


def write_unit(path: str, unit: CompUnit):
    with open(path, "wb") as fh:
        fh.write(unit_to_mln_bytes(unit))


class MlnFile:
    def __init__(self, kind, constants_text, payload):
        self.kind = kind
        self.constants_text = constants_text
        self.payload = payload


def parse_mln_bytes(data: bytes) -> MlnFile:
    try:
        if data[:4] != MAGIC:
            raise MlnError("not an .mln file (bad magic)")
        pos = 4
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise MlnError("unknown .mln format version %d" % version)
        (sig_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        sig = data[pos:pos + sig_len]
        if len(sig) != sig_len:
            raise MlnError("truncated signature")
        pos += sig_len
        kind = data[pos]
        pos += 1
        (clen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        const_b = data[pos:pos + clen]
        if len(const_b) != clen:
            raise MlnError("truncated constants text")
        pos += clen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        payload = data[pos:pos + plen]
        if len(payload) != plen:
            raise MlnError("truncated payload")
        pos += plen
        if pos != len(data):
            raise MlnError("trailing bytes in .mln file")
    except (struct.error, IndexError) as e:
        raise MlnError("malformed .mln file: %s" % e) from e
    if kind not in (KIND_LIMPLE, KIND_NATIVE):
        raise MlnError("unknown unit kind %d" % kind)
    abi = compute_abi_hash()
    if _signature(abi, kind, const_b, payload) != sig:
        raise MlnError("unit signature mismatch: file is corrupt or was "
                       "produced by an incompatible compiler")
    return MlnFile(kind, const_b.decode("utf-8"), payload)


class LoadedUnit:
    """Bookkeeping for one loaded compilation unit."""

    def __init__(self, path, kind):
        self.path = path
        self.kind = kind
        self.installed: dict[Symbol, object] = {}
        self.reloc_values = []
        self.unloaded = False
        self.native = None          # native runtime handle, when kind native

    def definition_refcount(self, env):
        return sum(1 for name, fn in self.installed.items()
                   if env.functions.get(name) is fn)

    def __repr__(self):
        return "#<loaded-unit %s>" % os.path.basename(self.path)


def load_unit(path: str, env, ctx=None) -> LoadedUnit:
    """Load an .mln: verify the signature, bind the payload, read the
    constants, and run the unit's top-level to install its definitions.
    On any error the environment is left exactly as before."""
    with open(path, "rb") as fh:
        data = fh.read()
    mln = parse_mln_bytes(data)
    if ctx is None:
        ctx = ExecState(env)
    lu = LoadedUnit(path, mln.kind)
    snap = env.snapshot()
    before = dict(env.functions)
    try:
        if mln.kind == KIND_LIMPLE:
            unit = deserialize_unit(mln.payload)
            if unit.abi_hash != compute_abi_hash():
                raise MlnError("unit abi hash does not match this runtime")
            _check_constants(mln.constants_text, unit)
            lu.reloc_values = list(unit.data_relocs)
            from .vm import UnitRuntime, install_compunit
            rt = UnitRuntime(unit)
            install_compunit(rt, env, ctx)
        else:
            from .native import load_native_payload
            load_native_payload(lu, mln, path, env, ctx)
    except MiniLispError:
        env.restore(snap)
        raise
    for name, fn in env.functions.items():
        if before.get(name) is not fn:
            lu.installed[name] = fn
            fn.native_loaded = True
            fn.home_unit = lu
    env.loaded_units.append(lu)
    return lu


def _check_constants(constants_text: str, unit: CompUnit):
    from .objects import structurally_equal, list_to_value
    parsed = read(constants_text) if constants_text.strip() else NIL
    if not structurally_equal(parsed, list_to_value(list(unit.data_relocs))):
        raise MlnError("constants text does not match unit data relocations")


def unload_unit(lu: LoadedUnit, env):
    """Remove the unit's definitions and release it.

    A definition that is still installed and has been called is a live
    reference: unload refuses and the environment stays untouched.
    Definitions that were overridden by a later load are no obstacle."""
    if lu.unloaded:
        return
    live = []
    for name, fn in lu.installed.items():
        if env.functions.get(name) is fn and getattr(fn, "calls", 0) > 0:
            live.append(name.name)
    if live:
        raise LiveReferenceError(
            "cannot unload %s: live definitions %s"
            % (os.path.basename(lu.path), ", ".join(sorted(live))),
            sorted(live))
    for name, fn in lu.installed.items():
        if env.functions.get(name) is fn:
            del env.functions[name]
    if lu in env.loaded_units:
        env.loaded_units.remove(lu)
    if lu.native is not None:
        lu.native.release()
    lu.unloaded = True


def is_native_function(v) -> bool:
    """True exactly for functions installed by load_unit."""
    return getattr(v, "native_loaded", False) is True
