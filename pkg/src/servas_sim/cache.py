"""Tweak-tagged caching: the functional in-path cache and offline analytics.

The functional cache is the inline-tag variant: every line carries the full
software tweak next to the data, a hit requires both the address and the
tweak to match, and the cache is write-through so physical memory always
holds current ciphertext.  An address hit with a different tweak drops the
entry (nothing to flush under write-through) and refills through the
engine, which is exactly where cross-context accesses die with an
authentication error instead of a TLB shootdown.

The analytics half is independent of any machine: exact integer formulas
for the extra tag storage of the inline variant versus a deduplicating
tweak cache, and a Monte Carlo for the eviction probability of a
set-associative tweak cache under random (hash-distributed) set indices.

Monte Carlo method notes: each trial inserts every distinct tweak exactly
once; set indices are uniform draws standing in for the cryptographic index
derivation.  Draws are generated so that runs over the same seed are
prefix-coupled across tweak counts and refinement-coupled across set
counts, which makes the monotonicity properties exact for a fixed seed
rather than statistical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tweak import PRV_BITS, PTE_BITS, SID_BITS, XRANGE_BITS, voffset_bits

LINE_BITS_DEFAULT = 512


@dataclass(frozen=True)
class CacheCfg:
    """Geometry of one main cache (data and instruction caches are twins)."""

    n_lines: int = 512
    ways: int = 4
    line_bits: int = LINE_BITS_DEFAULT
    va_bits: int = 48

    def __post_init__(self) -> None:
        if self.n_lines % self.ways:
            raise ValueError("n_lines must divide evenly into ways")


@dataclass(frozen=True)
class TcCfg:
    """A tweak-cache sizing point."""

    n_tweak: int
    tc_ways: int = 2
    voffset_low_bits: int = 6  # voffset bits kept inline in the main cache

    def __post_init__(self) -> None:
        if self.n_tweak < 1 or self.n_tweak & (self.n_tweak - 1):
            raise ValueError("n_tweak must be a power of two")


def servas_tag_bits(va_bits: int = 48) -> int:
    """Software tweak bits stored per line in the inline variant
    (134 for 48-bit virtual addresses, 125 for 39-bit)."""
    return voffset_bits(va_bits) + XRANGE_BITS + PRV_BITS + PTE_BITS + SID_BITS


def inline_overhead_bits(cfg: CacheCfg) -> int:
    """Total extra tag bits across the data + instruction caches."""
    return 2 * servas_tag_bits(cfg.va_bits) * cfg.n_lines


def tc_overhead_bits(cfg: CacheCfg, tc: TcCfg) -> int:
    """Total extra bits with a deduplicating tweak cache.

    Each main-cache line keeps the low voffset bits plus an index into the
    tweak cache; each tweak-cache entry stores a valid bit and the rest of
    the tweak.
    """
    b_total = servas_tag_bits(cfg.va_bits)
    if tc.voffset_low_bits > voffset_bits(cfg.va_bits):
        raise ValueError("voffset split exceeds the voffset width")
    b_tweakidx = tc.n_tweak.bit_length() - 1  # log2 of a power of two
    per_line = tc.voffset_low_bits + b_tweakidx
    tc_store = (1 + b_total - tc.voffset_low_bits) * tc.n_tweak
    return 2 * per_line * cfg.n_lines + tc_store


def break_even_lines(tc: TcCfg, va_bits: int = 48, max_exp: int = 24) -> int:
    """Smallest power-of-two main-cache size where the tweak cache beats
    the inline variant."""
    for exp in range(max_exp + 1):
        n = 1 << exp
        cfg = CacheCfg(n_lines=n, ways=1, va_bits=va_bits)
        if tc_overhead_bits(cfg, tc) < inline_overhead_bits(cfg):
            return n
    raise ValueError("no break-even point in range")


class EvictionMode(enum.Enum):
    AT_LEAST_ONE = "at_least_one"
    TOTAL = "total"


def simulate_eviction(
    n_entries: int,
    ways: int,
    n_tweaks: int,
    trials: int = 10000,
    mode: EvictionMode = EvictionMode.TOTAL,
    seed: int = 0,
) -> float:
    """Probability of tweak eviction when ``n_tweaks`` random tweaks land in
    an ``n_entries``-entry, ``ways``-way store.

    AT_LEAST_ONE: fraction of trials where any entry was evicted.
    TOTAL: expected fraction of the inserted tweaks that got evicted.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if n_entries % ways:
        raise ValueError("n_entries must divide evenly into ways")
    n_sets = n_entries // ways
    rng = np.random.default_rng(seed)
    # (n_tweaks, trials) layout keeps draws for tweak j identical across
    # runs with different n_tweaks (prefix coupling, see module docstring).
    us = rng.random((n_tweaks, trials))
    sets = (us * n_sets).astype(np.int64)
    flat = sets + np.arange(trials, dtype=np.int64)[None, :] * n_sets
    counts = np.bincount(flat.ravel(), minlength=trials * n_sets).reshape(trials, n_sets)
    evicted = np.maximum(counts - ways, 0).sum(axis=1)
    if mode is EvictionMode.AT_LEAST_ONE:
        return float((evicted > 0).mean())
    return float((evicted / n_tweaks).mean())


def eviction_grid(entries_list, ways_list, tweak_counts, trials=10000, seed=0):
    """Rows of (n_entries, ways, n_tweaks, mode, probability, trials, seed)
    for both modes across the full parameter grid."""
    rows = []
    for n_entries in entries_list:
        for ways in ways_list:
            for n_tweaks in tweak_counts:
                for mode in (EvictionMode.AT_LEAST_ONE, EvictionMode.TOTAL):
                    p = simulate_eviction(n_entries, ways, n_tweaks, trials, mode, seed)
                    rows.append((n_entries, ways, n_tweaks, mode.value, p, trials, seed))
    return rows


def overhead_sweep(n_lines_list, tc_cfgs, va_bits=48):
    """Rows of (n_lines, n_tweak, b_voffsetL, inline_bits, tc_bits, break_even)."""
    rows = []
    for n_lines in n_lines_list:
        cfg = CacheCfg(n_lines=n_lines, ways=1, va_bits=va_bits)
        inline = inline_overhead_bits(cfg)
        for tc in tc_cfgs:
            rows.append((
                n_lines, tc.n_tweak, tc.voffset_low_bits,
                inline, tc_overhead_bits(cfg, tc), break_even_lines(tc, va_bits),
            ))
    return rows


# --- the functional in-path cache -------------------------------------------


@dataclass
class _Entry:
    line_index: int
    sw_int: int
    data: bytes


class TweakTaggedCache:
    """Set-associative, write-through, inline tweak tags.

    The machine supplies a fill callback so authentication failures
    propagate from the refill path untouched; a failed fill caches nothing.
    """

    def __init__(self, cfg: CacheCfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.n_sets = cfg.n_lines // cfg.ways
        self.sets: list[list[_Entry]] = [[] for _ in range(self.n_sets)]
        self.hits = 0
        self.misses = 0
        self.tweak_mismatches = 0

    def _set_of(self, line_index: int) -> list[_Entry]:
        return self.sets[line_index % self.n_sets]

    def _find(self, line_index: int) -> _Entry | None:
        for entry in self._set_of(line_index):
            if entry.line_index == line_index:
                return entry
        return None

    def read(self, line_index: int, sw, fill) -> bytes:
        sw_int = sw.to_int()
        entry = self._find(line_index)
        if entry is not None:
            if entry.sw_int == sw_int:
                self.hits += 1
                return entry.data
            # Address match under a different tweak: under write-through the
            # memory copy is already current, so the stale tag is just dropped
            # before the refill attempt under the new tweak.
            self.tweak_mismatches += 1
            self._set_of(line_index).remove(entry)
        self.misses += 1
        data = fill(line_index, sw)  # may raise AuthenticationError
        self._insert(line_index, sw_int, data)
        return data

    def update(self, line_index: int, sw, data: bytes) -> None:
        """Install the post-write line image (the write itself already went
        through to the engine)."""
        sw_int = sw.to_int()
        entry = self._find(line_index)
        if entry is not None:
            if entry.sw_int != sw_int:
                self.tweak_mismatches += 1
                self._set_of(line_index).remove(entry)
            else:
                entry.data = data
                return
        self._insert(line_index, sw_int, data)

    def _insert(self, line_index: int, sw_int: int, data: bytes) -> None:
        ways = self._set_of(line_index)
        if len(ways) >= self.cfg.ways:
            ways.pop(self.rng.randrange(len(ways)))
        ways.append(_Entry(line_index, sw_int, data))

    def invalidate(self, line_index: int) -> None:
        entry = self._find(line_index)
        if entry is not None:
            self._set_of(line_index).remove(entry)

    def invalidate_all(self) -> None:
        self.sets = [[] for _ in range(self.n_sets)]
