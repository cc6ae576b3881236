"""The trusted M-mode security monitor.

The monitor owns the whole enclave lifecycle: loading images, entering and
exiting, interruption, dynamic page preparation and destruction, in-place
re-encryption, swapping and sealing.  It is stateless apart from the
monotonically increasing runtime-id counter: everything else lives in two
per-enclave MONITOR pages (metadata + thread state) that are OS-allocated
but sealed under an M-mode tweak, so the monitor re-reads and re-verifies
its own state on every call.  Destroying those pages erases the enclave as
far as the monitor is concerned.

Page initialization works through the tweak-override registers: for every
line the monitor pins all five software tweak fields to exactly the values
the enclave's own accesses will compose later, then writes through the
normal access path.  That is the entire trust story -- the OS-controlled
page tables never have to be believed.

Swap-out seals a page with a fresh nonce and records (nonce, tag, address,
permissions) in the metadata page; only that exact sealed version can come
back in.  The sealed bytes are written to the OS-supplied temporary page
under the plain S-mode identity-mapping tweak (map it ``rw``, not user)
so the OS can move them to disk.

Authentication faults route here.  Faults on an address with a live swap
record are the legitimate demand-swap flow and cost nothing; any other
fault inside an enclave bumps its fault counter, and the enclave is
terminated at the configured threshold, which is what defeats online
brute-force probing of shared-memory secrets and enclave identities.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

from .aead import AeadAuthError, get_aead
from .image import (
    EnclaveImage,
    ImagePageType,
    InvalidImage,
    load_enclave_image,
    parse_header,
)
from .machine import (
    LINES_PER_PAGE,
    PAGE_BYTES,
    AccessKind,
    Machine,
    PageFault,
    Trap,
)
from .mee import LINE_BYTES
from .tweak import (
    PRV_M,
    PRV_S,
    PRV_U,
    SID_MASK,
    InvalidCombination,
    PageType,
    RangeReg,
    TweakOverride,
    classify_page_type,
    pack_pte_bits,
    truncate_sid,
)


class MonitorError(Exception):
    """Base of all monitor API failures."""


class BadHandle(MonitorError):
    pass


class WrongState(MonitorError):
    pass


class NotInEnclave(MonitorError):
    pass


class MonitorTypeForbidden(MonitorError):
    pass


class DoubleMap(MonitorError):
    pass


class RangeViolation(MonitorError):
    pass


class NotOwned(MonitorError):
    pass


class TypeNotSwappable(MonitorError):
    pass


class SwapAuthFailure(MonitorError):
    pass


class NoRecord(MonitorError):
    pass


class MonitorCapacity(MonitorError):
    pass


class EnclaveState(enum.IntEnum):
    LOADED = 1
    RUNNING = 2
    INTERRUPTED = 3
    TERMINATED = 4


class DispositionKind(enum.Enum):
    RETRY_DENIED = "retry_denied"
    ENCLAVE_TERMINATED = "enclave_terminated"
    DELAY = "delay"


@dataclass(frozen=True)
class Disposition:
    kind: DispositionKind
    delay: int = 0


@dataclass(frozen=True)
class EnclaveHandle:
    """What the OS/application holds: the two monitor page numbers."""

    meta_ppn: int
    thread_ppn: int


_PTYPE_CODE = {PageType.REGULAR: 1, PageType.SHENCLAVE: 2, PageType.SHM: 3}
_PTYPE_FROM_CODE = {v: k for k, v in _PTYPE_CODE.items()}

_RSW_FOR = {PageType.REGULAR: 0b01, PageType.SHENCLAVE: 0b10, PageType.SHM: 0b11}


def pack_perm_byte(perms: dict[str, bool]) -> int:
    return (perms["r"] | perms["w"] << 1 | perms["x"] << 2
            | perms["u"] << 3 | perms.get("g", False) << 4)


def unpack_perm_byte(b: int) -> dict[str, bool]:
    return {"r": bool(b & 1), "w": bool(b & 2), "x": bool(b & 4),
            "u": bool(b & 8), "g": bool(b & 16)}


@dataclass
class OwnedPage:
    va: int
    page_type: PageType
    perms: dict[str, bool]
    rsw: int


@dataclass
class SwapRecord:
    va: int
    nonce: bytes
    tag: bytes
    perms: dict[str, bool]
    rsw: int
    page_type: PageType
    live: bool


_META_FIXED = struct.Struct("<4sHBBQ32sQQQIHH16sQB7x")
_META_MAGIC = b"SMEP"
_OWNED = struct.Struct("<QBBB5x")
_SWAP = struct.Struct("<Q12s16sBBBB8x")
_THREAD_FIXED = struct.Struct("<4sHBB")
_THREAD_MAGIC = b"SMTP"
MAX_OWNED = 64
MAX_SWAPS = 40

_REGS_OFF = 0x70
_URANGE_OFF = 0x170
_USID_OFF = 0x188
_OWNED_OFF = 0x198
_SWAP_OFF = _OWNED_OFF + MAX_OWNED * _OWNED.size


@dataclass
class EnclaveMeta:
    state: EnclaveState
    rtid: int
    encid_full: bytes
    entry_point: int
    mrange: RangeReg
    host_space: str
    fault_count: int = 0
    host_pc: int = 0
    host_prv: int = PRV_U
    host_regs: list[int] = field(default_factory=lambda: [0] * 32)
    host_urange: RangeReg = field(default_factory=RangeReg)
    host_usid0: int = 0
    host_usid1: int = 0
    owned: list[OwnedPage] = field(default_factory=list)
    swaps: list[SwapRecord] = field(default_factory=list)

    def pack(self) -> bytes:
        if len(self.owned) > MAX_OWNED:
            raise MonitorCapacity("too many owned pages for the metadata page")
        if len(self.swaps) > MAX_SWAPS:
            raise MonitorCapacity("too many swap records for the metadata page")
        buf = bytearray(PAGE_BYTES)
        _META_FIXED.pack_into(
            buf, 0, _META_MAGIC, 1, int(self.state), 0, self.rtid, self.encid_full,
            self.entry_point, self.mrange.base, self.mrange.size,
            self.fault_count, len(self.owned), len(self.swaps),
            self.host_space.encode()[:16], self.host_pc, self.host_prv,
        )
        for i, r in enumerate(self.host_regs):
            struct.pack_into("<Q", buf, _REGS_OFF + 8 * i, r)
        struct.pack_into("<QQB", buf, _URANGE_OFF, self.host_urange.base,
                         self.host_urange.size, self.host_urange.enabled)
        struct.pack_into("<QQ", buf, _USID_OFF, self.host_usid0, self.host_usid1)
        for i, o in enumerate(self.owned):
            _OWNED.pack_into(buf, _OWNED_OFF + i * _OWNED.size, o.va,
                             _PTYPE_CODE[o.page_type], pack_perm_byte(o.perms), o.rsw)
        for i, s in enumerate(self.swaps):
            _SWAP.pack_into(buf, _SWAP_OFF + i * _SWAP.size, s.va, s.nonce, s.tag,
                            pack_perm_byte(s.perms), s.rsw, _PTYPE_CODE[s.page_type], s.live)
        return bytes(buf)

    @classmethod
    def unpack(cls, buf: bytes) -> "EnclaveMeta":
        (magic, version, state, _, rtid, encid, entry, mbase, msize, faults,
         n_owned, n_swaps, space, host_pc, host_prv) = _META_FIXED.unpack_from(buf)
        if magic != _META_MAGIC or version != 1:
            raise BadHandle("not an enclave metadata page")
        regs = [struct.unpack_from("<Q", buf, _REGS_OFF + 8 * i)[0] for i in range(32)]
        ubase, usize, uen = struct.unpack_from("<QQB", buf, _URANGE_OFF)
        usid0, usid1 = struct.unpack_from("<QQ", buf, _USID_OFF)
        owned = []
        for i in range(n_owned):
            va, code, perm, rsw = _OWNED.unpack_from(buf, _OWNED_OFF + i * _OWNED.size)
            owned.append(OwnedPage(va, _PTYPE_FROM_CODE[code], unpack_perm_byte(perm), rsw))
        swaps = []
        for i in range(n_swaps):
            va, nonce, tag, perm, rsw, code, live = _SWAP.unpack_from(buf, _SWAP_OFF + i * _SWAP.size)
            swaps.append(SwapRecord(va, nonce, tag, unpack_perm_byte(perm), rsw,
                                    _PTYPE_FROM_CODE[code], bool(live)))
        return cls(
            state=EnclaveState(state), rtid=rtid, encid_full=encid, entry_point=entry,
            mrange=RangeReg(mbase, msize, True), host_space=space.rstrip(b"\x00").decode(),
            fault_count=faults, host_pc=host_pc, host_prv=host_prv, host_regs=regs,
            host_urange=RangeReg(ubase, usize, bool(uen)), host_usid0=usid0,
            host_usid1=usid1, owned=owned, swaps=swaps,
        )


_T_PC_OFF = 0x08
_T_REGS_OFF = 0x10
_T_URANGE_OFF = 0x110
_T_USID_OFF = 0x128
_T_FLAGS_OFF = 0x138


@dataclass
class ThreadMeta:
    in_enclave: bool = False
    resume_pc: int = 0
    saved_regs: list[int] | None = None
    saved_urange: RangeReg = field(default_factory=RangeReg)
    saved_usid0: int = 0
    saved_usid1: int = 0

    def pack(self) -> bytes:
        buf = bytearray(PAGE_BYTES)
        _THREAD_FIXED.pack_into(buf, 0, _THREAD_MAGIC, 1, self.in_enclave, 0)
        struct.pack_into("<Q", buf, _T_PC_OFF, self.resume_pc)
        for i, r in enumerate(self.saved_regs or [0] * 32):
            struct.pack_into("<Q", buf, _T_REGS_OFF + 8 * i, r)
        struct.pack_into("<QQB", buf, _T_URANGE_OFF, self.saved_urange.base,
                         self.saved_urange.size, self.saved_urange.enabled)
        struct.pack_into("<QQ", buf, _T_USID_OFF, self.saved_usid0, self.saved_usid1)
        struct.pack_into("<B", buf, _T_FLAGS_OFF, self.saved_regs is not None)
        return bytes(buf)

    @classmethod
    def unpack(cls, buf: bytes) -> "ThreadMeta":
        magic, version, in_enc, _ = _THREAD_FIXED.unpack_from(buf)
        if magic != _THREAD_MAGIC or version != 1:
            raise BadHandle("not a thread metadata page")
        pc = struct.unpack_from("<Q", buf, _T_PC_OFF)[0]
        regs = [struct.unpack_from("<Q", buf, _T_REGS_OFF + 8 * i)[0] for i in range(32)]
        ubase, usize, uen = struct.unpack_from("<QQB", buf, _T_URANGE_OFF)
        usid0, usid1 = struct.unpack_from("<QQ", buf, _T_USID_OFF)
        has_regs = struct.unpack_from("<B", buf, _T_FLAGS_OFF)[0]
        return cls(in_enclave=bool(in_enc), resume_pc=pc,
                   saved_regs=regs if has_regs else None,
                   saved_urange=RangeReg(ubase, usize, bool(uen)),
                   saved_usid0=usid0, saved_usid1=usid1)


def kdf(key: bytes, label: bytes, data: bytes = b"", n: int = 16) -> bytes:
    return hmac.new(key, label + b"\x00" + data, hashlib.sha256).digest()[:n]


def derive_developer_key(cpu_key: bytes, developer_id: bytes) -> bytes:
    return kdf(cpu_key, b"developer-key", developer_id)


MONITOR_PTE_BITS = pack_pte_bits(r=True, w=True, x=False, u=False, g=False, rsw=0)
_TEMP_PAGE_PTE_BITS = pack_pte_bits(r=True, w=True, x=False, u=False, g=False, rsw=0)


@dataclass(frozen=True)
class PageCtx:
    """A page's tweak-relevant identity for in-place re-encryption."""

    page_type: PageType
    perms: dict[str, bool]
    rsw: int | None = None
    sid: int | None = None  # explicit shared secret for SHM rekeying

    def resolved_rsw(self) -> int:
        return self.rsw if self.rsw is not None else _RSW_FOR[self.page_type]


class SecurityMonitor:
    """Monitor instance bound to one machine.

    ``fault_threshold`` is the number of authentication faults one enclave
    may cause before it is terminated; ``delay_penalty`` is a simulated tick
    cost charged per fault (pure bookkeeping, returned in the disposition).
    """

    def __init__(self, machine: Machine, fault_threshold: int = 3,
                 delay_penalty: int = 0, aead: str = "aes-gcm", rtid_start: int = 1):
        self.machine = machine
        self.fault_threshold = fault_threshold
        self.delay_penalty = delay_penalty
        self.aead = get_aead(aead)
        self._rtid_next = rtid_start  # the monitor's only mutable state
        self._in_monitor = False
        machine.sm_auth_handler = self.handle_auth_fault

    # --- plumbing -----------------------------------------------------------

    @contextmanager
    def _monitor_call(self):
        assert not self._in_monitor, "monitor calls never nest"
        self._in_monitor = True
        saved_prv = self.machine.prv
        self.machine.prv = PRV_M
        try:
            yield saved_prv
        finally:
            if self.machine.prv == PRV_M:
                self.machine.prv = saved_prv
            self._in_monitor = False

    def _override_write(self, pa: int, data: bytes, override: TweakOverride) -> None:
        m = self.machine
        m.write_csr(PRV_M, "store_override", override)
        try:
            m.access(None, pa, AccessKind.WRITE, PRV_M, data=data)
        finally:
            m.write_csr(PRV_M, "store_override", None)

    def _override_read(self, pa: int, override: TweakOverride, size: int = LINE_BYTES) -> bytes:
        m = self.machine
        m.write_csr(PRV_M, "load_override", override)
        try:
            return m.access(None, pa, AccessKind.READ, PRV_M, size=size)
        finally:
            m.write_csr(PRV_M, "load_override", None)

    def _monitor_line_override(self, pa: int) -> TweakOverride:
        return TweakOverride(xrange=0, voffset=(pa // LINE_BYTES) & ((1 << (self.machine.va_bits - 6)) - 1),
                             prv=PRV_M, pte=MONITOR_PTE_BITS, sid=0)

    def _read_monitor_page(self, ppn: int) -> bytes:
        base = ppn * PAGE_BYTES
        return b"".join(
            self._override_read(base + i * LINE_BYTES, self._monitor_line_override(base + i * LINE_BYTES))
            for i in range(LINES_PER_PAGE)
        )

    def _write_monitor_page(self, ppn: int, content: bytes) -> None:
        base = ppn * PAGE_BYTES
        for i in range(LINES_PER_PAGE):
            pa = base + i * LINE_BYTES
            self._override_write(pa, content[i * LINE_BYTES:(i + 1) * LINE_BYTES],
                                 self._monitor_line_override(pa))

    def _load_meta(self, handle: EnclaveHandle) -> EnclaveMeta:
        return EnclaveMeta.unpack(self._read_monitor_page(handle.meta_ppn))

    def _store_meta(self, handle: EnclaveHandle, meta: EnclaveMeta) -> None:
        self._write_monitor_page(handle.meta_ppn, meta.pack())

    def _load_thread(self, handle: EnclaveHandle) -> ThreadMeta:
        return ThreadMeta.unpack(self._read_monitor_page(handle.thread_ppn))

    def _store_thread(self, handle: EnclaveHandle, thread: ThreadMeta) -> None:
        self._write_monitor_page(handle.thread_ppn, thread.pack())

    # --- tweak-field resolution for enclave pages ----------------------------

    def _encid_sid(self, encid_full: bytes) -> int:
        # The 80-bit derived identity, capped to the 64-bit msid1 register
        # that actually supplies it during enclave execution.
        return self.derive_truncated_encid(encid_full) & ((1 << 64) - 1)

    def derive_truncated_encid(self, encid_full: bytes) -> int:
        mac = kdf(self.machine.cpu_key, b"encid-sid", encid_full, n=32)
        return int.from_bytes(mac, "big") & SID_MASK

    def _page_fields(self, meta: EnclaveMeta, ctx: PageCtx, va: int,
                     urange: RangeReg | None = None):
        """(xrange, voffset_base, pte_bits, sid) an enclave access composes."""
        rsw = ctx.resolved_rsw()
        pte_bits = pack_pte_bits(ctx.perms["r"], ctx.perms["w"], ctx.perms["x"],
                                 ctx.perms["u"], ctx.perms.get("g", False), rsw)
        classify_page_type(
            {PageType.REGULAR: 0b100, PageType.SHENCLAVE: 0b100, PageType.SHM: 0b001}[ctx.page_type],
            PRV_U, pte_bits, rsw,
        )
        if ctx.page_type in (PageType.REGULAR, PageType.SHENCLAVE):
            if not meta.mrange.contains(va) or not meta.mrange.contains(va + PAGE_BYTES - 1):
                raise RangeViolation("page lies outside the enclave range")
            base = meta.mrange.base
            xrange = 0b100
            sid = meta.rtid if ctx.page_type is PageType.REGULAR else self._encid_sid(meta.encid_full)
        else:  # SHM
            if urange is None or not urange.enabled:
                raise RangeViolation("shared memory needs an enabled user range")
            if not urange.contains(va) or not urange.contains(va + PAGE_BYTES - 1):
                raise RangeViolation("shared page lies outside the user range")
            if meta.mrange.contains(va):
                raise RangeViolation("shared page aliases the enclave range")
            base = urange.base
            xrange = 0b001
            sid = ctx.sid if ctx.sid is not None else truncate_sid(
                self.machine.csr.usid0, self.machine.csr.usid1)
        voffset_base = (va - base) // LINE_BYTES
        return xrange, voffset_base, pte_bits, sid

    def _init_page(self, ppn: int, content: bytes, xrange: int, voffset_base: int,
                   pte_bits: int, sid: int, prv: int = PRV_U) -> None:
        base = ppn * PAGE_BYTES
        for i in range(LINES_PER_PAGE):
            ov = TweakOverride(xrange=xrange, voffset=voffset_base + i, prv=prv,
                               pte=pte_bits, sid=sid)
            self._override_write(base + i * LINE_BYTES,
                                 content[i * LINE_BYTES:(i + 1) * LINE_BYTES], ov)

    def _read_page(self, ppn: int, xrange: int, voffset_base: int, pte_bits: int,
                   sid: int, prv: int = PRV_U) -> bytes:
        base = ppn * PAGE_BYTES
        return b"".join(
            self._override_read(base + i * LINE_BYTES,
                                TweakOverride(xrange=xrange, voffset=voffset_base + i,
                                              prv=prv, pte=pte_bits, sid=sid))
            for i in range(LINES_PER_PAGE)
        )

    def _walk_ppn(self, space: str, va: int) -> int:
        pte = self.machine.walk(space, va)
        if pte is None:
            raise PageFault(va, PRV_M, "enclave page not mapped by the OS")
        return pte.ppn

    def _destroy_page(self, ppn: int) -> None:
        base_line = ppn * PAGE_BYTES // LINE_BYTES
        for i in range(LINES_PER_PAGE):
            self.machine.mee.destroy(base_line + i)
            if self.machine.cache is not None:
                self.machine.cache.invalidate(base_line + i)

    # --- lifecycle API -------------------------------------------------------

    def ecreate(self, host_space: str, image, target_base: int, stack_pages: int,
                meta_ppn: int, thread_ppn: int) -> EnclaveHandle:
        """Load an image: authenticate (and unwrap), initialize every page
        through the tweak override, set up both monitor pages, allocate a
        fresh runtime id."""
        with self._monitor_call():
            if isinstance(image, (bytes, bytearray)):
                _, dev_id, _, _ = parse_header(bytes(image))
                dev_key = derive_developer_key(self.machine.cpu_key, dev_id)
                image = load_enclave_image(bytes(image), dev_key)
            elif not isinstance(image, EnclaveImage):
                raise TypeError("image must be bytes or an EnclaveImage")
            image.validate()
            if target_base % PAGE_BYTES:
                raise InvalidImage("target base must be page aligned")
            encid = image.encid()
            rtid = self._rtid_next
            self._rtid_next += 1
            region_pages = image.n_region_pages + stack_pages
            mrange = RangeReg(target_base, region_pages * PAGE_BYTES, True)
            meta = EnclaveMeta(
                state=EnclaveState.LOADED, rtid=rtid, encid_full=encid,
                entry_point=target_base + image.entry_offset, mrange=mrange,
                host_space=host_space,
            )
            encid_sid = self._encid_sid(encid)
            for page in image.pages:
                va = target_base + page.index * PAGE_BYTES
                ppn = self._walk_ppn(host_space, va)
                ptype = (PageType.REGULAR if page.page_type is ImagePageType.REGULAR
                         else PageType.SHENCLAVE)
                sid = rtid if ptype is PageType.REGULAR else encid_sid
                pte_bits = pack_pte_bits(page.perms["r"], page.perms["w"], page.perms["x"],
                                         page.perms["u"], page.perms["g"], page.rsw)
                self._init_page(ppn, page.body, 0b100, (va - target_base) // LINE_BYTES,
                                pte_bits, sid)
                meta.owned.append(OwnedPage(va, ptype, dict(page.perms), page.rsw))
            stack_perms = {"r": True, "w": True, "x": False, "u": True, "g": False}
            stack_bits = pack_pte_bits(True, True, False, True, False, 0b01)
            for i in range(stack_pages):
                va = target_base + (image.n_region_pages + i) * PAGE_BYTES
                ppn = self._walk_ppn(host_space, va)
                self._init_page(ppn, bytes(PAGE_BYTES), 0b100,
                                (va - target_base) // LINE_BYTES, stack_bits, rtid)
                meta.owned.append(OwnedPage(va, PageType.REGULAR, dict(stack_perms), 0b01))
            handle = EnclaveHandle(meta_ppn, thread_ppn)
            self._store_meta(handle, meta)
            self._store_thread(handle, ThreadMeta())
            return handle

    def eenter(self, handle: EnclaveHandle, args: dict[int, int] | None = None) -> None:
        """Trap from the host into the enclave: save the host context, wire
        the enclave CSRs, resume or start at the entry point."""
        m = self.machine
        with self._monitor_call() as caller_prv:
            meta = self._load_meta(handle)
            thread = self._load_thread(handle)
            if meta.state not in (EnclaveState.LOADED, EnclaveState.INTERRUPTED):
                raise WrongState(f"cannot enter enclave in state {meta.state.name}")
            meta.host_regs = list(m.regs)
            meta.host_pc = m.pc
            meta.host_prv = caller_prv
            meta.host_urange = m.csr.urange
            meta.host_usid0 = m.csr.usid0
            meta.host_usid1 = m.csr.usid1
            m.write_csr(PRV_M, "mrange", meta.mrange)
            m.write_csr(PRV_M, "msid0", meta.rtid)
            m.write_csr(PRV_M, "msid1", self._encid_sid(meta.encid_full))
            if meta.state is EnclaveState.INTERRUPTED:
                m.regs = list(thread.saved_regs)
                m.pc = thread.resume_pc
                m.write_csr(PRV_M, "urange", thread.saved_urange)
                m.write_csr(PRV_M, "usid0", thread.saved_usid0)
                m.write_csr(PRV_M, "usid1", thread.saved_usid1)
                thread.saved_regs = None
            else:
                m.regs = [0] * len(m.regs)
                for reg, val in (args or {}).items():
                    m.set_reg(reg, val)
                m.pc = meta.entry_point
                m.write_csr(PRV_M, "urange", RangeReg())  # shared memory starts disabled
                m.write_csr(PRV_M, "usid0", 0)
                m.write_csr(PRV_M, "usid1", 0)
            meta.state = EnclaveState.RUNNING
            thread.in_enclave = True
            self._store_meta(handle, meta)
            self._store_thread(handle, thread)
            m.active_enclave = handle
            m.prv = PRV_U

    def eexit(self, returns: dict[int, int] | None = None) -> None:
        """Leave the enclave: host registers come back except the return
        value registers, and the enclave CSRs are reset."""
        m = self.machine
        handle = m.active_enclave
        if handle is None:
            raise NotInEnclave("no enclave is executing")
        with self._monitor_call():
            meta = self._load_meta(handle)
            thread = self._load_thread(handle)
            ret_vals = {10: m.regs[10], 11: m.regs[11]}
            ret_vals.update(returns or {})
            m.regs = list(meta.host_regs)
            for reg, val in ret_vals.items():
                m.set_reg(reg, val)
            m.pc = meta.host_pc + 4  # continue after the enter site
            self._reset_enclave_csrs(meta)
            meta.state = EnclaveState.LOADED
            thread.in_enclave = False
            self._store_meta(handle, meta)
            self._store_thread(handle, thread)
            m.active_enclave = None
            m.prv = meta.host_prv

    def interrupt(self) -> None:
        """Asynchronous interruption: park the enclave state in the thread
        page, wipe the register file, hand control to the OS."""
        m = self.machine
        handle = m.active_enclave
        if handle is None:
            raise NotInEnclave("no enclave is executing")
        with self._monitor_call():
            meta = self._load_meta(handle)
            thread = self._load_thread(handle)
            thread.saved_regs = list(m.regs)
            thread.resume_pc = m.pc
            thread.saved_urange = m.csr.urange
            thread.saved_usid0 = m.csr.usid0
            thread.saved_usid1 = m.csr.usid1
            thread.in_enclave = False
            m.regs = [0] * len(m.regs)  # the OS sees nothing
            self._reset_enclave_csrs(meta)
            meta.state = EnclaveState.INTERRUPTED
            self._store_meta(handle, meta)
            self._store_thread(handle, thread)
            m.active_enclave = None
            m.prv = PRV_S

    def _reset_enclave_csrs(self, meta: EnclaveMeta) -> None:
        m = self.machine
        m.write_csr(PRV_M, "mrange", RangeReg())
        m.write_csr(PRV_M, "msid0", 0)
        m.write_csr(PRV_M, "msid1", 0)
        m.write_csr(PRV_M, "urange", meta.host_urange)
        m.write_csr(PRV_M, "usid0", meta.host_usid0)
        m.write_csr(PRV_M, "usid1", meta.host_usid1)

    # --- dynamic memory ------------------------------------------------------

    def _active_handle(self) -> EnclaveHandle:
        handle = self.machine.active_enclave
        if handle is None:
            raise NotInEnclave("call is only valid from inside an enclave")
        return handle

    def eprepare(self, va: int, page_type: PageType, perms: dict[str, bool],
                 rsw: int | None = None) -> None:
        """Zero-initialize a dynamically supplied page to an enclave-chosen
        type.  Every type except MONITOR is allowed; the per-enclave mapping
        list rejects double mapping."""
        if page_type is PageType.MONITOR:
            raise MonitorTypeForbidden("enclaves cannot mint monitor pages")
        if page_type not in _RSW_FOR:
            raise InvalidCombination(f"cannot prepare {page_type}")
        handle = self._active_handle()
        m = self.machine
        caller_urange = m.csr.urange
        with self._monitor_call():
            meta = self._load_meta(handle)
            ctx = PageCtx(page_type, perms, rsw)
            if rsw is not None and rsw != _RSW_FOR[page_type]:
                raise InvalidCombination("rsw bits disagree with the page type")
            if any(o.va == va for o in meta.owned):
                raise DoubleMap(f"page {va:#x} is already mapped into the enclave")
            xrange, voffset_base, pte_bits, sid = self._page_fields(
                meta, ctx, va, urange=caller_urange)
            ppn = self._walk_ppn(meta.host_space, va)
            self._init_page(ppn, bytes(PAGE_BYTES), xrange, voffset_base, pte_bits, sid)
            meta.owned.append(OwnedPage(va, page_type, dict(perms), ctx.resolved_rsw()))
            self._store_meta(handle, meta)

    def edestroy(self, va: int) -> None:
        """Release a page: every line is re-sealed under the reserved tweak,
        so any later use fails authentication until re-prepared."""
        handle = self._active_handle()
        with self._monitor_call():
            meta = self._load_meta(handle)
            entry = next((o for o in meta.owned if o.va == va), None)
            if entry is None:
                raise NotOwned(f"page {va:#x} is not mapped into the enclave")
            self._destroy_page(self._walk_ppn(meta.host_space, va))
            meta.owned.remove(entry)
            self._store_meta(handle, meta)

    def emod(self, va: int, old_ctx: PageCtx, new_ctx: PageCtx) -> None:
        """In-place re-encryption: read every line under the old context,
        rewrite under the new one.  Content is preserved bit for bit; a
        wrong old context dies on the first line."""
        handle = self._active_handle()
        m = self.machine
        caller_urange = m.csr.urange
        with self._monitor_call():
            meta = self._load_meta(handle)
            old = self._page_fields(meta, old_ctx, va, urange=caller_urange)
            new = self._page_fields(meta, new_ctx, va, urange=caller_urange)
            ppn = self._walk_ppn(meta.host_space, va)
            content = self._read_page(ppn, *old)
            self._init_page(ppn, content, *new)
            entry = next((o for o in meta.owned if o.va == va), None)
            if entry is not None:
                entry.page_type = new_ctx.page_type
                entry.perms = dict(new_ctx.perms)
                entry.rsw = new_ctx.resolved_rsw()
                self._store_meta(handle, meta)

    def egetsealkey(self) -> bytes:
        """Deterministic 128-bit sealing key bound to (image hash, CPU key)."""
        handle = self._active_handle()
        with self._monitor_call():
            meta = self._load_meta(handle)
            return kdf(self.machine.cpu_key, b"seal-key", meta.encid_full)

    # --- swapping ------------------------------------------------------------

    def _swap_key(self, meta: EnclaveMeta) -> bytes:
        return kdf(self.machine.cpu_key, b"swap-key", meta.rtid.to_bytes(8, "little"))

    def _swap_ad(self, meta: EnclaveMeta, va: int, perms: dict[str, bool],
                 rsw: int, page_type: PageType) -> bytes:
        return struct.pack("<QQBBB", meta.rtid, va, pack_perm_byte(perms), rsw,
                           _PTYPE_CODE[page_type])

    def swap_out(self, handle: EnclaveHandle, va: int, temp_ppn: int) -> bytes:
        """Seal one enclave page into the OS-supplied temporary page and
        invalidate the original.  Monitor and shared-data pages stay put."""
        with self._monitor_call():
            meta = self._load_meta(handle)
            entry = next((o for o in meta.owned if o.va == va), None)
            if entry is None:
                raise NotOwned(f"page {va:#x} is not mapped into the enclave")
            if entry.page_type is PageType.SHM:
                raise TypeNotSwappable("shared-data pages are excluded from swapping")
            assert not any(s.va == va and s.live for s in meta.swaps)
            ctx = PageCtx(entry.page_type, entry.perms, entry.rsw)
            fields = self._page_fields(meta, ctx, va)
            ppn = self._walk_ppn(meta.host_space, va)
            content = self._read_page(ppn, *fields)
            nonce = self.machine.rng.randbytes(self.aead.nonce_len)
            sealed, tag = self.aead.seal(
                self._swap_key(meta), nonce, content,
                self._swap_ad(meta, va, entry.perms, entry.rsw, entry.page_type))
            base = temp_ppn * PAGE_BYTES
            for i in range(LINES_PER_PAGE):
                ov = TweakOverride(xrange=0, voffset=(base // LINE_BYTES) + i,
                                   prv=PRV_S, pte=_TEMP_PAGE_PTE_BITS, sid=0)
                self._override_write(base + i * LINE_BYTES,
                                     sealed[i * LINE_BYTES:(i + 1) * LINE_BYTES], ov)
            self._destroy_page(ppn)
            meta.swaps = [s for s in meta.swaps if s.live or s.va != va]
            meta.swaps.append(SwapRecord(va, nonce, tag, dict(entry.perms),
                                         entry.rsw, entry.page_type, live=True))
            meta.owned.remove(entry)
            self._store_meta(handle, meta)
            return sealed

    def swap_in(self, handle: EnclaveHandle, va: int, sealed: bytes) -> None:
        """Re-admit exactly the most recently sealed version of a page.  The
        stored nonce/tag pin one version; anything else fails."""
        with self._monitor_call():
            meta = self._load_meta(handle)
            record = next((s for s in meta.swaps if s.va == va and s.live), None)
            if record is None:
                raise NoRecord(f"no live swap record for page {va:#x}")
            try:
                content = self.aead.open(
                    self._swap_key(meta), record.nonce, sealed, record.tag,
                    self._swap_ad(meta, va, record.perms, record.rsw, record.page_type))
            except AeadAuthError as exc:
                raise SwapAuthFailure("sealed page is stale or tampered") from exc
            ctx = PageCtx(record.page_type, record.perms, record.rsw)
            fields = self._page_fields(meta, ctx, va)
            ppn = self._walk_ppn(meta.host_space, va)
            self._init_page(ppn, content, *fields)
            record.live = False
            meta.owned.append(OwnedPage(va, record.page_type, dict(record.perms), record.rsw))
            self._store_meta(handle, meta)

    # --- the authentication-exception handler --------------------------------

    def handle_auth_fault(self, trap) -> Disposition:
        """Rate-limit and termination policy for authentication faults."""
        if self._in_monitor:
            # The monitor's own probe (image check, re-encryption read, ...)
            # is reported to its caller, never charged to an enclave.
            return Disposition(DispositionKind.RETRY_DENIED)
        m = self.machine
        handle = m.active_enclave
        if handle is None:
            return Disposition(DispositionKind.RETRY_DENIED)
        with self._monitor_call():
            try:
                meta = self._load_meta(handle)
            except (Trap, MonitorError):
                return Disposition(DispositionKind.RETRY_DENIED)
            page_va = trap.va - (trap.va % PAGE_BYTES)
            if any(s.va == page_va and s.live for s in meta.swaps):
                # Legitimate touch of a swapped-out page: the demand-swap
                # flow, not an attack.  No penalty.
                return Disposition(DispositionKind.RETRY_DENIED)
            meta.fault_count += 1
            if meta.fault_count >= self.fault_threshold:
                thread = self._load_thread(handle)
                thread.in_enclave = False
                thread.saved_regs = None
                meta.state = EnclaveState.TERMINATED
                m.regs = [0] * len(m.regs)
                self._reset_enclave_csrs(meta)
                self._store_meta(handle, meta)
                self._store_thread(handle, thread)
                m.active_enclave = None
                self.machine.prv = PRV_S
                return Disposition(DispositionKind.ENCLAVE_TERMINATED)
            self._store_meta(handle, meta)
            if self.delay_penalty:
                return Disposition(DispositionKind.DELAY, self.delay_penalty)
            return Disposition(DispositionKind.RETRY_DENIED)

    # --- inspection (tests) --------------------------------------------------

    def peek_meta(self, handle: EnclaveHandle) -> EnclaveMeta:
        with self._monitor_call():
            return self._load_meta(handle)

    def peek_thread(self, handle: EnclaveHandle) -> ThreadMeta:
        with self._monitor_call():
            return self._load_thread(handle)
