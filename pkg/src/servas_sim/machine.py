"""The simulated machine: physical line memory, page tables, CSRs, traps.

One machine is one logical hart.  Enclaves and hosts are not executed as
instructions; callers drive the machine through :meth:`Machine.access`,
page-table edits and CSR writes, which is enough to exercise every
isolation property end to end.

Access pipeline: page-table walk -> permission check -> tweak composition
(with the M-mode override applied when armed) -> page-type classification
-> optional tweak-tagged cache -> encryption engine.  M-mode accesses are
untranslated (virtual address == physical address, no PTE).

Writes are read-modify-write at line granularity: the existing line must
verify under the access tweak before the merged line is re-sealed.  Lines
that were never written at all stand in for boot-time zeroed DRAM and
verify as zeros under any tweak.  The one exception is an M-mode write with
the store override armed, which skips verification -- that is how the
security monitor initializes pages regardless of their previous binding.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
from dataclasses import dataclass, field

from .mee import LINE_BYTES, AuthenticationError, Mee
from .tweak import (
    PRV_M,
    PRV_S,
    PRV_U,
    Basis,
    InvalidCombination,
    PageType,
    PrivilegeViolation,
    RangeReg,
    SwTweak,
    TweakOverride,
    classify_tweak,
    compose_sw_tweak,
    pack_pte_bits,
)

PAGE_BYTES = 4096
LINES_PER_PAGE = PAGE_BYTES // LINE_BYTES

SNAPSHOT_VERSION = "servas-machine-v1"

_PRV_RANK = {PRV_U: 0, PRV_S: 1, PRV_M: 2}


class AccessKind(enum.Enum):
    READ = "read"
    WRITE = "write"
    FETCH = "fetch"


class Trap(Exception):
    """Base of every fault the access pipeline can raise."""

    kind = "TRAP"

    def __init__(self, va: int | None = None, prv: int | None = None, detail: str = ""):
        self.va = va
        self.prv = prv
        self.detail = detail
        super().__init__(f"{self.kind} va={va:#x} prv={prv} {detail}" if va is not None else f"{self.kind} {detail}")


class PageFault(Trap):
    kind = "PAGE_FAULT"


class PrivilegeTrap(Trap):
    kind = "PRIVILEGE"


class InvalidCombinationTrap(Trap):
    kind = "INVALID_COMBINATION"


class AuthenticationException(Trap):
    """Raised whenever line decryption fails; routed to the monitor handler."""

    kind = "AUTH"

    def __init__(self, va, prv, sw: SwTweak, line_index: int, disposition=None):
        self.sw = sw
        self.line_index = line_index
        self.disposition = disposition
        super().__init__(va, prv, f"line={line_index:#x}")


@dataclass
class Pte:
    ppn: int
    r: bool = False
    w: bool = False
    x: bool = False
    u: bool = False
    g: bool = False
    rsw: int = 0
    valid: bool = True

    @property
    def bits(self) -> int:
        return pack_pte_bits(self.r, self.w, self.x, self.u, self.g, self.rsw)


def perms_from_str(perms: str) -> dict[str, bool]:
    """``"rwxug"`` subset string to PTE flag dict."""
    bad = set(perms) - set("rwxug")
    if bad:
        raise ValueError(f"unknown permission letters {bad}")
    return {flag: flag in perms for flag in "rwxug"}


@dataclass
class CsrFile:
    mrange: RangeReg = field(default_factory=RangeReg)
    srange: RangeReg = field(default_factory=RangeReg)
    urange: RangeReg = field(default_factory=RangeReg)
    msid0: int = 0
    msid1: int = 0
    ssid0: int = 0
    ssid1: int = 0
    usid0: int = 0
    usid1: int = 0
    load_override: TweakOverride | None = None
    store_override: TweakOverride | None = None

    def sid_regs(self) -> dict[Basis, tuple[int, int]]:
        return {
            Basis.M: (self.msid0, self.msid1),
            Basis.S: (self.ssid0, self.ssid1),
            Basis.U: (self.usid0, self.usid1),
        }


_CSR_LEVEL = {
    "mrange": PRV_M, "msid0": PRV_M, "msid1": PRV_M,
    "srange": PRV_S, "ssid0": PRV_S, "ssid1": PRV_S,
    "urange": PRV_U, "usid0": PRV_U, "usid1": PRV_U,
    "load_override": PRV_M, "store_override": PRV_M,
}

N_REGS = 32
_REG_MASK = (1 << 64) - 1


class Machine:
    """A single simulated hart plus its physical memory and engine."""

    def __init__(self, seed: int = 0, va_bits: int = 48, aead: str = "aes-gcm",
                 cache_cfg=None):
        self.va_bits = va_bits
        # str seeding is stable across processes (unlike tuple/hash seeding)
        self.rng = random.Random(f"servas-machine-{seed}")
        self.mee_key = self.rng.randbytes(16)
        self.mee = Mee(self.mee_key, aead=aead, va_bits=va_bits)
        self.csr = CsrFile()
        self.spaces: dict[str, dict[int, Pte]] = {}
        self.regs = [0] * N_REGS
        self.pc = 0
        self.prv = PRV_S
        self.bypass = False
        self.plain_lines: dict[int, bytes] = {}
        self.sm_auth_handler = None  # set by the security monitor
        self.active_enclave = None
        self.cache = None
        if cache_cfg is not None:
            from .cache import TweakTaggedCache

            self.cache = TweakTaggedCache(cache_cfg, self.rng)

    # --- registers ---------------------------------------------------------

    def set_reg(self, idx: int, value: int) -> None:
        self.regs[idx] = value & _REG_MASK

    def get_reg(self, idx: int) -> int:
        return self.regs[idx]

    # --- page tables (the untrusted OS surface) ----------------------------

    def map_page(self, caller_prv: int, space: str, va: int, ppn: int,
                 perms: str = "rw", rsw: int = 0) -> None:
        """Install a mapping.  Deliberately unvalidated beyond privilege:
        the OS is the attacker and may alias or remap anything."""
        if caller_prv not in (PRV_S, PRV_M):
            raise PrivilegeTrap(va, caller_prv, "page tables are managed at S-mode or above")
        if va % PAGE_BYTES:
            raise ValueError("mappings are page aligned")
        flags = perms_from_str(perms)
        self.spaces.setdefault(space, {})[va // PAGE_BYTES] = Pte(ppn=ppn, rsw=rsw, **flags)

    def unmap_page(self, caller_prv: int, space: str, va: int) -> None:
        if caller_prv not in (PRV_S, PRV_M):
            raise PrivilegeTrap(va, caller_prv, "page tables are managed at S-mode or above")
        self.spaces.get(space, {}).pop(va // PAGE_BYTES, None)

    def walk(self, space: str, va: int) -> Pte | None:
        pte = self.spaces.get(space, {}).get(va // PAGE_BYTES)
        if pte is None or not pte.valid:
            return None
        return pte

    # --- CSRs ---------------------------------------------------------------

    def write_csr(self, prv: int, name: str, value) -> None:
        level = _CSR_LEVEL.get(name)
        if level is None:
            raise ValueError(f"unknown CSR {name!r}")
        if _PRV_RANK[prv] < _PRV_RANK[level]:
            raise PrivilegeTrap(None, prv, f"CSR {name} requires privilege >= {level:#b}")
        if name.endswith("range"):
            if not isinstance(value, RangeReg):
                value = RangeReg(*value)
            value.validate(self.va_bits)
        elif name.endswith(("0", "1")):
            value = int(value)
            if not 0 <= value < (1 << 64):
                raise ValueError("sid registers are 64-bit")
        elif name.endswith("override"):
            if value is not None and not isinstance(value, TweakOverride):
                raise ValueError("override CSR takes a TweakOverride or None")
        setattr(self.csr, name, value)

    def read_csr(self, prv: int, name: str):
        if name == "cpu_key":
            if prv != PRV_M:
                raise PrivilegeTrap(None, prv, "the CPU key is never readable below M-mode")
            return self.cpu_key
        level = _CSR_LEVEL.get(name)
        if level is None:
            raise ValueError(f"unknown CSR {name!r}")
        if _PRV_RANK[prv] < _PRV_RANK[level]:
            raise PrivilegeTrap(None, prv, f"CSR {name} requires privilege >= {level:#b}")
        return getattr(self.csr, name)

    @property
    def cpu_key(self) -> bytes:
        return hmac.new(self.mee_key, b"cpu-key", hashlib.sha256).digest()[:16]

    def set_bypass(self, prv: int, enabled: bool) -> None:
        """Toggle the encryption bypass for unprotected-classified accesses.
        The functional cache is flushed first so no tagged state leaks
        across the mode change."""
        if prv != PRV_M:
            raise PrivilegeTrap(None, prv, "bypass control is M-mode only")
        if self.cache is not None:
            self.cache.invalidate_all()
        self.bypass = enabled

    # --- the access pipeline -----------------------------------------------

    def compose_for_access(self, va: int, prv: int, pte_bits: int,
                           kind: AccessKind) -> SwTweak:
        override = self.csr.load_override if kind in (AccessKind.READ, AccessKind.FETCH) \
            else self.csr.store_override
        if prv != PRV_M:
            override = None  # override registers apply to M-mode accesses only
        return compose_sw_tweak(
            va & ~(LINE_BYTES - 1), prv, pte_bits,
            self.csr.mrange, self.csr.srange, self.csr.urange,
            self.csr.sid_regs(), self.va_bits,
            override=override, override_prv=PRV_M,
        )

    def access(self, space: str, va: int, kind: AccessKind, prv: int,
               data: bytes | None = None, size: int = 1) -> bytes:
        """Perform one byte-granular access within a single 64-byte line.

        Returns the bytes read (or written back) or raises exactly one trap:
        PageFault, AuthenticationException, PrivilegeTrap or
        InvalidCombinationTrap.
        """
        if kind is AccessKind.WRITE:
            if not data:
                raise ValueError("WRITE needs data")
            size = len(data)
        offset = va % LINE_BYTES
        if offset + size > LINE_BYTES:
            raise ValueError("access crosses a line boundary")
        if va >= (1 << self.va_bits):
            raise PageFault(va, prv, "virtual address exceeds address width")

        if prv == PRV_M:
            pa, pte_bits = va, 0
            if self.csr.store_override is not None and kind is AccessKind.WRITE:
                pte_bits = self.csr.store_override.pte or 0
            elif self.csr.load_override is not None and kind is not AccessKind.WRITE:
                pte_bits = self.csr.load_override.pte or 0
        else:
            pte = self.walk(space, va)
            if pte is None:
                raise PageFault(va, prv, "unmapped")
            need = {AccessKind.READ: pte.r, AccessKind.WRITE: pte.w, AccessKind.FETCH: pte.x}
            if not need[kind]:
                raise PageFault(va, prv, f"{kind.value} permission missing")
            if prv == PRV_U and not pte.u:
                raise PageFault(va, prv, "user access to a supervisor page")
            pa = pte.ppn * PAGE_BYTES + (va % PAGE_BYTES)
            pte_bits = pte.bits

        try:
            sw = self.compose_for_access(va, prv, pte_bits, kind)
            ptype = classify_tweak(sw)
        except InvalidCombination as exc:
            raise InvalidCombinationTrap(va, prv, str(exc)) from exc
        except PrivilegeViolation as exc:
            raise PrivilegeTrap(va, prv, str(exc)) from exc

        line_index = pa // LINE_BYTES
        line_off = pa % LINE_BYTES

        if self.bypass and ptype is PageType.UNPROTECTED:
            return self._plain_access(line_index, line_off, kind, data, size)

        skip_verify = (
            kind is AccessKind.WRITE and prv == PRV_M
            and self.csr.store_override is not None and self.csr.store_override.armed
        )
        try:
            if kind is AccessKind.WRITE:
                return self._write_line(line_index, line_off, data, sw, skip_verify)
            return self._read_line(line_index, sw)[line_off : line_off + size]
        except AuthenticationError as exc:
            trap = AuthenticationException(va, prv, sw, line_index)
            if self.sm_auth_handler is not None:
                trap.disposition = self.sm_auth_handler(trap)
            raise trap from exc

    def _fill_line(self, line_index: int, sw: SwTweak) -> bytes:
        """Line content under a tweak; never-written DRAM reads as zeros."""
        if not self.mee.line_exists(line_index):
            return bytes(LINE_BYTES)
        return self.mee.read(line_index, sw)

    def _read_line(self, line_index: int, sw: SwTweak) -> bytes:
        if self.cache is not None:
            return self.cache.read(line_index, sw, self._fill_line)
        return self._fill_line(line_index, sw)

    def _write_line(self, line_index: int, off: int, data: bytes, sw: SwTweak,
                    skip_verify: bool) -> bytes:
        if skip_verify:
            old = bytes(LINE_BYTES)
            if self.cache is not None:
                self.cache.invalidate(line_index)
        elif self.cache is not None:
            old = self.cache.read(line_index, sw, self._fill_line)
        else:
            old = self._fill_line(line_index, sw)
        merged = old[:off] + data + old[off + len(data):]
        self.mee.write(line_index, merged, sw)
        if self.cache is not None and not skip_verify:
            self.cache.update(line_index, sw, merged)
        return data

    def _plain_access(self, line_index: int, off: int, kind: AccessKind,
                      data: bytes | None, size: int) -> bytes:
        line = self.plain_lines.get(line_index, bytes(LINE_BYTES))
        if kind is AccessKind.WRITE:
            self.plain_lines[line_index] = line[:off] + data + line[off + len(data):]
            return data
        return line[off : off + size]

    # --- physical attacker hooks --------------------------------------------

    def phys_snapshot(self, line_indices) -> dict[int, tuple[bytes, bytes]]:
        return {i: self.mee.snapshot_line(i) for i in line_indices}

    def phys_restore(self, snapshot: dict[int, tuple[bytes, bytes]]) -> None:
        for i, (ct, tag) in snapshot.items():
            self.mee.restore_line(i, ct, tag)
        if self.cache is not None:
            for i in snapshot:
                self.cache.invalidate(i)

    def phys_flip_bit(self, line_index: int, bit: int, target: str = "ciphertext") -> None:
        self.mee.flip_bit(line_index, bit, target)
        if self.cache is not None:
            self.cache.invalidate(line_index)

    # --- deterministic state snapshots ---------------------------------------

    def snapshot(self) -> dict:
        """Versioned, JSON-serializable machine state for scenario replay."""
        csr = self.csr
        return {
            "version": SNAPSHOT_VERSION,
            "va_bits": self.va_bits,
            "prv": self.prv,
            "pc": self.pc,
            "regs": list(self.regs),
            "bypass": self.bypass,
            "mee_key": self.mee_key.hex(),  # snapshots are plaintext state dumps
            "aead": self.mee.aead.name,
            "mee": self.mee.dump_state(),
            "plain_lines": {str(i): b.hex() for i, b in self.plain_lines.items()},
            "csr": {
                "ranges": {
                    n: [getattr(csr, n).base, getattr(csr, n).size, getattr(csr, n).enabled]
                    for n in ("mrange", "srange", "urange")
                },
                "sids": {n: getattr(csr, n)
                         for n in ("msid0", "msid1", "ssid0", "ssid1", "usid0", "usid1")},
            },
            "spaces": {
                s: {str(vpn): [p.ppn, p.r, p.w, p.x, p.u, p.g, p.rsw, p.valid]
                    for vpn, p in table.items()}
                for s, table in self.spaces.items()
            },
        }

    def restore_snapshot(self, snap: dict) -> None:
        if snap.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {snap.get('version')!r}")
        self.prv = snap["prv"]
        self.pc = snap["pc"]
        self.regs = list(snap["regs"])
        self.bypass = snap["bypass"]
        self.mee_key = bytes.fromhex(snap["mee_key"])
        self.va_bits = snap["va_bits"]
        self.mee = Mee(self.mee_key, aead=snap["aead"], va_bits=self.va_bits)
        self.mee.load_state(snap["mee"])
        self.plain_lines = {int(i): bytes.fromhex(h) for i, h in snap["plain_lines"].items()}
        for n, (base, size, enabled) in snap["csr"]["ranges"].items():
            setattr(self.csr, n, RangeReg(base, size, enabled))
        for n, v in snap["csr"]["sids"].items():
            setattr(self.csr, n, v)
        self.spaces = {
            s: {int(vpn): Pte(ppn=f[0], r=f[1], w=f[2], x=f[3], u=f[4], g=f[5],
                              rsw=f[6], valid=f[7])
                for vpn, f in table.items()}
            for s, table in snap["spaces"].items()
        }
        if self.cache is not None:
            self.cache.invalidate_all()
