"""Tweak composition and page-type classification.

The decision-table test re-interprets the table with an independent
row-matching engine and enumerates all 3,072 (xrange, privilege,
permission, rsw) combinations against it.
"""

import pytest
from hypothesis import given, strategies as st

from servas_sim.tweak import (
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
    classify_page_type,
    compose_sw_tweak,
    compute_voffset,
    match_ranges,
    pack_pte_bits,
    select_basis,
    select_sid,
    sw_tweak_bits,
    truncate_sid,
    unpack_pte_bits,
    voffset_bits,
)

DIS = RangeReg()


def _sid_regs(m=(0, 0), s=(0, 0), u=(0, 0)):
    return {Basis.M: m, Basis.S: s, Basis.U: u}


# --- widths and serialization -------------------------------------------------


def test_tweak_widths():
    assert sw_tweak_bits(48) == 134
    assert sw_tweak_bits(39) == 125
    assert voffset_bits(48) == 42
    assert voffset_bits(39) == 33


def test_serialization_field_order_golden():
    # Field order, most significant first: xrange | voffset | prv | pte | sid.
    sw = SwTweak(xrange=0b101, voffset=2, prv=PRV_U, pte=0b0100110, sid=0xDEADBEEF)
    bits = f"{0b101:03b}" + f"{2:042b}" + f"{PRV_U:02b}" + f"{0b0100110:07b}" \
        + f"{0xDEADBEEF:080b}"
    assert len(bits) == 134
    assert sw.to_int() == int(bits, 2)
    assert sw.to_bytes() == int(bits, 2).to_bytes(17, "big")


@given(
    xrange=st.integers(0, 7),
    voffset=st.integers(0, 2**42 - 1),
    prv=st.sampled_from([PRV_U, PRV_S, PRV_M]),
    pte=st.integers(0, 127),
    sid=st.integers(0, 2**80 - 1),
)
def test_serialization_roundtrip(xrange, voffset, prv, pte, sid):
    sw = SwTweak(xrange, voffset, prv, pte, sid)
    assert sw.to_int().bit_length() <= 134
    assert SwTweak.from_int(sw.to_int()) == sw


def test_narrow_va_roundtrip():
    sw = SwTweak(0b001, 2**33 - 1, PRV_U, 0x7F, 1, va_bits=39)
    assert sw.bit_width == 125
    assert SwTweak.from_int(sw.to_int(), va_bits=39) == sw
    with pytest.raises(ValueError):
        SwTweak(0, 2**33, PRV_U, 0, 0, va_bits=39)  # voffset too wide


def test_pte_bit_packing_roundtrip():
    for pte in range(128):
        bits = unpack_pte_bits(pte)
        assert pack_pte_bits(bits["r"], bits["w"], bits["x"], bits["u"],
                             bits["g"], bits["rsw"]) == pte


# --- range matching and basis selection ----------------------------------------


def test_match_ranges_all_disabled():
    assert match_ranges(0x1234_0000, DIS, DIS, DIS) == 0b000


def test_match_ranges_mrange_only():
    m = RangeReg(0x1000, 0x1000, True)
    assert match_ranges(0x1800, m, DIS, DIS) == 0b100


def test_match_ranges_overlap_sets_both_bits():
    m = RangeReg(0x1000, 0x2000, True)
    u = RangeReg(0x2000, 0x1000, True)
    assert match_ranges(0x2400, m, DIS, u) == 0b101


def test_match_ranges_disabled_matches_nothing():
    m = RangeReg(0x1000, 0x1000, False)
    assert match_ranges(0x1800, m, DIS, DIS) == 0b000


def test_range_boundaries_half_open():
    r = RangeReg(0x1000, 0x1000, True)
    assert r.contains(0x1000) and r.contains(0x1FFF)
    assert not r.contains(0xFFF) and not r.contains(0x2000)


def test_range_alignment_validation():
    with pytest.raises(ValueError):
        RangeReg(0x1020, 0x1000, True).validate(48)
    with pytest.raises(ValueError):
        RangeReg(0x1000, 0x1010, True).validate(48)
    RangeReg(0x1000, 0x1000, True).validate(48)


@pytest.mark.parametrize("bitmap,basis", [
    (0b101, Basis.U),  # user range has precedence
    (0b111, Basis.U),
    (0b110, Basis.S),
    (0b100, Basis.M),
    (0b000, Basis.NONE),
])
def test_select_basis(bitmap, basis):
    assert select_basis(bitmap) == basis


def test_compute_voffset_relative():
    bases = {Basis.M: 0x40_0000}
    assert compute_voffset(0x40_0000, Basis.M, bases) == 0
    assert compute_voffset(0x40_0000 + 128, Basis.M, bases) == 2


def test_compute_voffset_absolute_when_unmatched():
    assert compute_voffset(0x1000, Basis.NONE, {}) == 0x40
    # truncated to the field width
    wide = (1 << 48) - 64
    assert compute_voffset(wide, Basis.NONE, {}) == (wide >> 6) & (2**42 - 1)


# --- sid selection ---------------------------------------------------------------


def test_select_sid_single_registers():
    regs = _sid_regs(m=(0x1234, 0x5678))
    assert select_sid(Basis.M, 0b01, regs) == 0x1234
    assert select_sid(Basis.M, 0b10, regs) == 0x5678


@given(a=st.integers(0, 2**64 - 1), b=st.integers(0, 2**64 - 1))
def test_select_sid_concatenation_truncates_to_80(a, b):
    # low 80 bits of (high register << 64 | low register)
    expected = ((b << 64) | a) % (1 << 80)
    assert select_sid(Basis.U, 0b11, _sid_regs(u=(a, b))) == expected
    assert truncate_sid(a, b) == expected


def test_select_sid_zero_cases():
    regs = _sid_regs(m=(5, 6), u=(7, 8))
    assert select_sid(Basis.M, 0b00, regs) == 0
    assert select_sid(Basis.NONE, 0b11, regs) == 0


# --- the decision table -----------------------------------------------------------


def _oracle_classify(xrange, prv, u, g, r, w, x, rsw):
    """Independent table interpretation: one predicate tuple per row,
    monitor row shadowing the no-range row."""
    rows = [
        (lambda: prv == PRV_M and r and w, PageType.MONITOR),
        (lambda: xrange == 0b000, PageType.UNPROTECTED),
        (lambda: xrange == 0b100 and prv == PRV_U and rsw == 0b01, PageType.REGULAR),
        (lambda: xrange == 0b100 and prv == PRV_U and rsw == 0b10 and not w,
         PageType.SHENCLAVE),
        (lambda: xrange == 0b001 and prv == PRV_U and rsw == 0b11 and not x,
         PageType.SHM),
    ]
    for predicate, ptype in rows:
        if predicate():
            return ptype
    return None


def test_decision_table_exhaustive():
    checked = 0
    for xrange in range(8):
        for prv in (PRV_U, PRV_S, PRV_M):
            for perm in range(32):
                u, g, r, w, x = (bool(perm >> i & 1) for i in range(5))
                for rsw in range(4):
                    pte = pack_pte_bits(r, w, x, u, g, rsw)
                    expected = _oracle_classify(xrange, prv, u, g, r, w, x, rsw)
                    if expected is None:
                        with pytest.raises(InvalidCombination):
                            classify_page_type(xrange, prv, pte, rsw)
                    else:
                        assert classify_page_type(xrange, prv, pte, rsw) == expected
                    checked += 1
    assert checked == 3072


def test_decision_table_named_rows():
    rx = pack_pte_bits(True, False, True, True, False, 0b10)
    assert classify_page_type(0b100, PRV_U, rx, 0b10) == PageType.SHENCLAVE
    rw = pack_pte_bits(True, True, False, True, False, 0b11)
    assert classify_page_type(0b001, PRV_U, rw, 0b11) == PageType.SHM
    rwx = pack_pte_bits(True, True, True, True, False, 0b11)
    with pytest.raises(InvalidCombination):
        classify_page_type(0b001, PRV_U, rwx, 0b11)  # shared data never executable
    w = pack_pte_bits(True, True, False, True, False, 0b10)
    with pytest.raises(InvalidCombination):
        classify_page_type(0b100, PRV_U, w, 0b10)  # shared code never writable
    monitor = pack_pte_bits(True, True, False, False, False, 0)
    assert classify_page_type(0b000, PRV_M, monitor, 0) == PageType.MONITOR
    assert classify_page_type(0b000, PRV_M, pack_pte_bits(True, False, False, False, False, 0), 0) \
        == PageType.UNPROTECTED


# --- composition -----------------------------------------------------------------


def _compose(va, prv, pte, mrange=DIS, srange=DIS, urange=DIS, sid_regs=None,
             override=None):
    return compose_sw_tweak(va, prv, pte, mrange, srange, urange,
                            sid_regs or _sid_regs(), override=override,
                            override_prv=PRV_M if override else None)


def test_compose_regular_row():
    mrange = RangeReg(0x4000_0000, 0x4000, True)
    pte = pack_pte_bits(True, True, False, True, False, 0b01)
    sw = _compose(0x4000_1000, PRV_U, pte, mrange=mrange,
                  sid_regs=_sid_regs(m=(77, 0)))
    assert sw.xrange == 0b100
    assert sw.voffset == 0x1000 // 64
    assert sw.sid == 77
    assert classify_page_type(sw.xrange, sw.prv, sw.pte, sw.rsw) == PageType.REGULAR


def test_compose_monitor_row_with_override():
    pte_rw = pack_pte_bits(True, True, False, False, False, 0)
    override = TweakOverride(xrange=0, prv=PRV_M, pte=pte_rw, sid=0)
    sw = _compose(0x8000, PRV_M, 0, override=override)
    assert classify_page_type(sw.xrange, sw.prv, sw.pte, sw.rsw) == PageType.MONITOR
    assert sw.sid == 0 and sw.voffset == 0x8000 // 64


def test_override_requires_m_mode():
    override = TweakOverride(sid=1)
    with pytest.raises(PrivilegeViolation):
        compose_sw_tweak(0, PRV_U, 0, DIS, DIS, DIS, _sid_regs(),
                         override=override, override_prv=PRV_U)


def test_override_equivalence_with_enclave_composition():
    """A full M-mode override reproducing the enclave's field values gives a
    bit-identical tweak -- the property page initialization relies on."""
    mrange = RangeReg(0x4000_0000, 0x4000, True)
    pte = pack_pte_bits(True, True, False, True, False, 0b01)
    regs = _sid_regs(m=(4242, 0))
    enclave_view = _compose(0x4000_0040, PRV_U, pte, mrange=mrange, sid_regs=regs)
    override = TweakOverride(xrange=0b100, voffset=1, prv=PRV_U, pte=pte, sid=4242)
    monitor_view = _compose(0x4000_0040, PRV_M, 0, override=override)
    assert monitor_view == enclave_view
    assert monitor_view.to_bytes() == enclave_view.to_bytes()


@given(
    va=st.integers(0, 2**48 - 64).map(lambda v: v & ~63),
    prv=st.sampled_from([PRV_U, PRV_S, PRV_M]),
    pte=st.integers(0, 127),
    msid=st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
)
def test_compose_is_pure(va, prv, pte, msid):
    mrange = RangeReg(0, 1 << 30, True)
    first = _compose(va % (1 << 30), prv, pte, mrange=mrange, sid_regs=_sid_regs(m=msid))
    second = _compose(va % (1 << 30), prv, pte, mrange=mrange, sid_regs=_sid_regs(m=msid))
    assert first == second


@given(
    off=st.integers(0, (1 << 20) - 64).map(lambda v: v & ~63),
    pte=st.integers(0, 127),
    m_base=st.integers(0, 2**30).map(lambda v: v & ~63),
    msid=st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
    ssid=st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
    usid=st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
)
def test_user_range_precedence_shields_other_levels(off, pte, m_base, msid, ssid, usid):
    """Once the user range matches, M/S range bases and sids cannot move
    voffset or sid (only the membership bitmap may differ)."""
    u_base = 0x7000_0000
    urange = RangeReg(u_base, 1 << 20, True)
    va = u_base + off
    baseline = _compose(va, PRV_U, pte, urange=urange, sid_regs=_sid_regs(u=usid))
    shadow = _compose(
        va, PRV_U, pte,
        mrange=RangeReg(m_base, 1 << 31, True), srange=RangeReg(0, 1 << 48, True),
        urange=urange, sid_regs=_sid_regs(m=msid, s=ssid, u=usid),
    )
    assert shadow.voffset == baseline.voffset
    assert shadow.sid == baseline.sid
