"""Interleaved time-bin discretisation of coincidence pairs.

A stream is divided into intervals of length ``d * tau_mzi``. Inside an
interval, the bin starting at ``family * delta_t + slot * tau_mzi`` (for
``family < tau_mzi / delta_t`` and ``slot < d``) belongs to the frame
``(interval, family)``: the d bins of a frame are spaced exactly one
interferometer delay apart, so superposition projectors connect
neighbouring slots of the same frame. Because ``delta_t`` divides
``tau_mzi`` the frames of all families tile every picosecond exactly once.

Clicks on a superposition (TSUP) channel are mapped to two-bin projectors:
a click in slot k >= 1 probes ``(|k-1> ± |k>)/sqrt(2)`` of its own frame,
a click in slot 0 probes ``(|3> ± |0'>)/sqrt(2)`` of the same family in
the previous interval, where the primed bin starts one delay after slot 3.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .certify import ProbabilityTables
from .errors import EmptySetting, OutOfRange
from .timetag import ChannelMap, CoincidenceBatch

D = 4
_TOA, _TSUP = 0, 1
_SIDE_A, _SIDE_B = 0, 1
_NO_OUTCOME = -1


class MultiClickPolicy(enum.Enum):
    """How to resolve frames holding more than one click on a side."""

    RANDOM_OUTCOME = "random"
    DISCARD_FRAME = "discard"


@dataclass(frozen=True)
class FrameConfig:
    """Geometry and bookkeeping knobs of the interleaved discretisation."""

    delta_t: int                 # time-bin length, ps
    tau_mzi: int = 2700          # interferometer delay, ps
    d: int = D                   # outcome dimension (fixed at 4)
    window: int | None = None    # coincidence window, ps; default d * tau_mzi
    policy: MultiClickPolicy = MultiClickPolicy.RANDOM_OUTCOME
    seed: int = 0
    plus_detector: str = "D"     # detector outcome mapped to the + projector sign

    def __post_init__(self):
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        if self.d != D:
            raise ValueError("only d = 4 is supported")
        if self.tau_mzi % self.delta_t != 0:
            raise ValueError(
                f"delta_t={self.delta_t} must divide tau_mzi={self.tau_mzi} "
                "for the interleaved frames to tile the stream"
            )
        if self.plus_detector not in ("D", "A"):
            raise ValueError("plus_detector must be 'D' or 'A'")
        if self.window is None:
            object.__setattr__(self, "window", self.d * self.tau_mzi)
        if self.window <= 0:
            raise ValueError("window must be positive")

    @property
    def families(self) -> int:
        return self.tau_mzi // self.delta_t

    @property
    def interval_ps(self) -> int:
        return self.d * self.tau_mzi


class BinCoord(NamedTuple):
    """Interleaved coordinates of one time bin."""

    interval: int
    family: int
    slot: int

    def start(self, cfg: FrameConfig) -> int:
        return (
            self.interval * cfg.interval_ps
            + self.family * cfg.delta_t
            + self.slot * cfg.tau_mzi
        )


def bin_index(t: int, cfg: FrameConfig) -> BinCoord:
    """Map a timestamp to its unique (interval, family, slot) coordinate."""
    if t < 0:
        raise ValueError("timestamps start at 0")
    interval, rest = divmod(int(t), cfg.interval_ps)
    slot, rest = divmod(rest, cfg.tau_mzi)
    return BinCoord(interval, rest // cfg.delta_t, slot)


@dataclass(frozen=True)
class TsupProjector:
    """Projector onto ``(|pair> + sign |pair+1>)/sqrt(2)``.

    ``pair = 3`` superposes slot 3 with the primed bin that starts one
    delay later. Pairs {0, 2} form the first complete superposition basis,
    pairs {1, 3} the second.
    """

    pair: int  # 0..3
    sign: int  # +1 or -1

    def __post_init__(self):
        if self.pair not in range(D):
            raise ValueError("pair index must be 0..3")
        if self.sign not in (+1, -1):
            raise ValueError("sign must be +1 or -1")

    @property
    def index(self) -> int:
        """Position on the 8x8 coincidence grid: 2*pair + (sign < 0)."""
        return 2 * self.pair + (0 if self.sign > 0 else 1)

    @property
    def basis(self) -> int:
        """1 for the {(0,1), (2,3)} basis, 2 for {(1,2), (3,0')}."""
        return 1 if self.pair in (0, 2) else 2


def tsup_projector_for_click(
    coord: BinCoord, detector_outcome: str, cfg: FrameConfig
) -> tuple[TsupProjector, tuple[int, int]]:
    """Projector and (interval, family) frame reference for a TSUP click.

    A click in slot k >= 1 probes pair (k-1, k) of its own frame; a click
    in slot 0 probes pair (3, primed) of the previous interval and raises
    OutOfRange at the very start of the stream.
    """
    if detector_outcome not in ("D", "A"):
        raise ValueError("detector outcome must be 'D' or 'A'")
    sign = +1 if (detector_outcome == cfg.plus_detector) else -1
    if coord.slot >= 1:
        return TsupProjector(coord.slot - 1, sign), (coord.interval, coord.family)
    if coord.interval == 0:
        raise OutOfRange("slot-0 click references the frame before the stream start")
    return TsupProjector(3, sign), (coord.interval - 1, coord.family)


@dataclass(frozen=True)
class SettingTotals:
    """Frame-coincidence counts per setting combination."""

    toa: int = 0
    tsup: int = 0
    mixed: int = 0

    def __add__(self, other: "SettingTotals") -> "SettingTotals":
        return SettingTotals(
            self.toa + other.toa, self.tsup + other.tsup, self.mixed + other.mixed
        )


@dataclass(frozen=True)
class CoincidenceTables:
    """Raw joint-outcome counts accumulated over frames.

    ``toa``  -- 4x4 slot counts for arrival-time frames where both
    polarizations matched. ``tsup`` -- 8x8 projector-pair counts. Frames
    whose parties clicked in different arms are tallied in
    ``totals.mixed`` but never tabulated.
    """

    toa: np.ndarray
    tsup: np.ndarray
    totals: SettingTotals = field(default_factory=SettingTotals)
    multi_click_count: int = 0
    discarded_slot0: int = 0
    dropped_pre_epoch: int = 0

    def __post_init__(self):
        toa = np.asarray(self.toa, dtype=np.int64)
        tsup = np.asarray(self.tsup, dtype=np.int64)
        object.__setattr__(self, "toa", toa)
        object.__setattr__(self, "tsup", tsup)
        if toa.shape != (D, D) or tsup.shape != (2 * D, 2 * D):
            raise ValueError("tables must be 4x4 (toa) and 8x8 (tsup)")
        if np.any(toa < 0) or np.any(tsup < 0):
            raise ValueError("counts must be non-negative")
        if int(toa.sum()) > self.totals.toa or int(tsup.sum()) > self.totals.tsup:
            raise ValueError("tabulated counts exceed the recorded totals")

    @classmethod
    def empty(cls) -> "CoincidenceTables":
        return cls(np.zeros((D, D), np.int64), np.zeros((2 * D, 2 * D), np.int64))

    def __add__(self, other: "CoincidenceTables") -> "CoincidenceTables":
        """Merge partial tables accumulated over frame-disjoint pair subsets."""
        return CoincidenceTables(
            self.toa + other.toa,
            self.tsup + other.tsup,
            self.totals + other.totals,
            self.multi_click_count + other.multi_click_count,
            self.discarded_slot0 + other.discarded_slot0,
            self.dropped_pre_epoch + other.dropped_pre_epoch,
        )

    def to_probabilities(self) -> ProbabilityTables:
        return tables_to_probabilities(self)


def _channel_luts(channels: ChannelMap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense channel-id lookup tables: party code, arm code, outcome code."""
    n = channels.max_channel() + 1
    party = np.full(n, 255, dtype=np.uint8)
    arm = np.full(n, 255, dtype=np.uint8)
    out = np.full(n, 255, dtype=np.uint8)
    for ch, role in channels.roles.items():
        party[ch] = 0 if role.party == "A" else 1
        arm[ch] = _TOA if role.arm == "TOA" else _TSUP
        out[ch] = 0 if role.outcome in ("H", "D") else 1
    return party, arm, out


def _frame_outcomes(
    t: np.ndarray,
    ch: np.ndarray,
    side: int,
    party_lut: np.ndarray,
    arm_lut: np.ndarray,
    out_lut: np.ndarray,
    cfg: FrameConfig,
):
    """Reduce one side's clicks to per-frame outcomes for both arms.

    Returns ``(keys_toa, codes_toa, keys_tsup, codes_tsup, stats)`` where a
    key encodes ``interval * families + family`` and a code encodes
    ``2*slot + polarization`` (TOA) or the projector index (TSUP). Frames
    with several clicks in the same arm are resolved by the configured
    policy; the random policy draws from a counter-based generator keyed by
    (seed, interval, family, side, arm) so any processing order and any
    parallel split over frames yields identical outcomes.
    """
    if ch.size and (int(ch.max()) >= party_lut.size or np.any(party_lut[ch] == 255)):
        raise ValueError("stream contains channels not present in the channel map")
    expect = _SIDE_A if side == _SIDE_A else _SIDE_B
    if ch.size and np.any(party_lut[ch] != expect):
        raise ValueError("event stream contains channels of the other party")

    period = cfg.interval_ps
    tau = cfg.tau_mzi
    fam_count = cfg.families

    interval = t // period
    rest = t - interval * period
    slot = rest // tau
    family = (rest - slot * tau) // cfg.delta_t
    arm = arm_lut[ch]
    out = out_lut[ch].astype(np.int64)

    stats = {"multi": 0, "slot0": 0, "pre_epoch": int(np.count_nonzero(t < 0))}
    results = []
    for kind in (_TOA, _TSUP):
        mask = (arm == kind) & (t >= 0)
        f_interval = interval[mask]
        f_family = family[mask]
        if kind == _TOA:
            codes = slot[mask] * 2 + out[mask]
        else:
            k = slot[mask]
            pair = np.where(k >= 1, k - 1, 3)
            f_interval = np.where(k >= 1, f_interval, f_interval - 1)
            sign_code = out[mask] if cfg.plus_detector == "D" else 1 - out[mask]
            codes = 2 * pair + sign_code
            underflow = f_interval < 0
            stats["slot0"] += int(np.count_nonzero(underflow))
            keep = ~underflow
            f_interval, f_family, codes = f_interval[keep], f_family[keep], codes[keep]
        keys = f_interval * fam_count + f_family
        results.append(_resolve_frames(keys, codes, kind, side, cfg, stats))
    (keys_toa, codes_toa), (keys_tsup, codes_tsup) = results
    return keys_toa, codes_toa, keys_tsup, codes_tsup, stats


def _resolve_frames(keys, codes, kind, side, cfg, stats):
    """Collapse clicks grouped by frame to one outcome per frame.

    Returns frame keys in ascending order. Outcomes are independent of the
    within-frame click order (single-click frames have one code, multi-click
    frames draw from the keyed generator), so an unstable sort is fine.
    """
    if keys.size == 0:
        return keys.astype(np.int64), codes.astype(np.int64)
    order = np.argsort(keys, kind="stable")  # radix sort: fast on near-sorted keys
    keys = keys[order]
    codes = codes[order]
    first = np.empty(keys.size, dtype=bool)
    first[0] = True
    np.not_equal(keys[1:], keys[:-1], out=first[1:])
    starts = np.flatnonzero(first)
    sizes = np.diff(np.append(starts, keys.size))

    single = sizes == 1
    out_keys = keys[starts]
    out_codes = codes[starts].astype(np.int64)
    if np.all(single):
        return out_keys, out_codes

    multi_idx = np.flatnonzero(~single)
    stats["multi"] += int(multi_idx.size)
    if cfg.policy is MultiClickPolicy.DISCARD_FRAME:
        return out_keys[single], out_codes[single]

    fam_count = cfg.families
    key_mask = (1 << 64) - 1
    for gi in multi_idx:
        frame_key = int(out_keys[gi])
        interval, family = divmod(frame_key, fam_count)
        gen = np.random.Generator(
            np.random.Philox(
                key=cfg.seed & key_mask, counter=[interval, family, side, kind]
            )
        )
        if kind == _TOA:
            out_codes[gi] = int(gen.integers(0, D)) * 2 + int(gen.integers(0, 2))
        else:
            out_codes[gi] = int(gen.integers(0, 2 * D))
    return out_keys, out_codes


def _intersect_sorted(left: np.ndarray, right: np.ndarray):
    """Positions of common elements of two sorted unique key arrays."""
    if left.size == 0 or right.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    pos = np.searchsorted(right, left)
    pos_clip = np.minimum(pos, right.size - 1)
    hit = right[pos_clip] == left
    return np.flatnonzero(hit), pos_clip[hit]


def accumulate_tables(
    pairs: CoincidenceBatch, channels: ChannelMap, cfg: FrameConfig
) -> CoincidenceTables:
    """Tabulate coincidence pairs into per-setting frame-outcome counts.

    Each side's clicks are framed independently; a frame contributes one
    count when both parties produced an outcome in the same arm. TOA
    frames additionally require matching polarization outcomes (the
    hyperentanglement filter); polarization-mismatched frames raise the
    total but not the table. Mixed-arm frames are counted in
    ``totals.mixed`` and dropped.
    """
    party_lut, arm_lut, out_lut = _channel_luts(channels)
    ka_toa, ca_toa, ka_tsup, ca_tsup, stats_a = _frame_outcomes(
        pairs.time_a, pairs.channel_a, _SIDE_A, party_lut, arm_lut, out_lut, cfg
    )
    kb_toa, cb_toa, kb_tsup, cb_tsup, stats_b = _frame_outcomes(
        pairs.time_b, pairs.channel_b, _SIDE_B, party_lut, arm_lut, out_lut, cfg
    )

    ia, ib = _intersect_sorted(ka_toa, kb_toa)
    totals_toa = int(ia.size)
    slots_a, pol_a = ca_toa[ia] >> 1, ca_toa[ia] & 1
    slots_b, pol_b = cb_toa[ib] >> 1, cb_toa[ib] & 1
    match = pol_a == pol_b
    toa = np.bincount(
        slots_a[match] * D + slots_b[match], minlength=D * D
    ).reshape(D, D)

    ia, ib = _intersect_sorted(ka_tsup, kb_tsup)
    totals_tsup = int(ia.size)
    tsup = np.bincount(
        ca_tsup[ia] * (2 * D) + cb_tsup[ib], minlength=4 * D * D
    ).reshape(2 * D, 2 * D)

    mixed = int(_intersect_sorted(ka_toa, kb_tsup)[0].size)
    mixed += int(_intersect_sorted(ka_tsup, kb_toa)[0].size)

    return CoincidenceTables(
        toa=toa,
        tsup=tsup,
        totals=SettingTotals(toa=totals_toa, tsup=totals_tsup, mixed=mixed),
        multi_click_count=stats_a["multi"] + stats_b["multi"],
        discarded_slot0=stats_a["slot0"] + stats_b["slot0"],
        dropped_pre_epoch=stats_a["pre_epoch"] + stats_b["pre_epoch"],
    )


def tables_to_probabilities(tables: CoincidenceTables) -> ProbabilityTables:
    """Normalize raw counts into joint probabilities and projector
    expectations.

    TOA probabilities are relative frequencies. Each party's eight
    superposition projectors form (approximately) two complete bases
    measured with weight 1/2 each, so expectation values are four times
    the relative frequency, clamped to 1; the primed-pair projectors make
    the approximation inexact, which downstream clamping absorbs.
    """
    n_toa = int(tables.toa.sum())
    n_tsup = int(tables.tsup.sum())
    if n_toa == 0:
        raise EmptySetting("no polarization-matched arrival-time coincidences")
    if n_tsup == 0:
        raise EmptySetting("no superposition-basis coincidences")
    return ProbabilityTables(
        toa=tables.toa / n_toa,
        tsup=np.minimum(4.0 * tables.tsup / n_tsup, 1.0),
    )


def accumulate_tables_split(
    pairs: CoincidenceBatch,
    channels: ChannelMap,
    cfg: FrameConfig,
    split_at: int,
) -> CoincidenceTables:
    """Accumulate two pair subsets separately and merge by addition.

    Exercises the merge contract: provided no frame receives clicks from
    both subsets (split on an interval gap wider than one interval), the
    merged tables equal single-pass accumulation exactly.
    """
    first = CoincidenceBatch(
        pairs.time_a[:split_at],
        pairs.channel_a[:split_at],
        pairs.time_b[:split_at],
        pairs.channel_b[:split_at],
    )
    second = CoincidenceBatch(
        pairs.time_a[split_at:],
        pairs.channel_a[split_at:],
        pairs.time_b[split_at:],
        pairs.channel_b[split_at:],
    )
    return accumulate_tables(first, channels, cfg) + accumulate_tables(second, channels, cfg)
