"""Detection-event data model, TTAG binary I/O, clock-offset estimation and
coincidence matching for two-party time-tag streams.

All timestamps are integer picoseconds since the stream epoch. Streams are
held as columnar numpy arrays for throughput; ``DetectionEvent`` and
``CoincidencePair`` are lightweight per-record views used for inspection
and tests.

TTAG container format (little-endian):
    header (16 bytes): magic ``b"TTAG"``, version u16 = 1, channel-count u16,
    record-count u64; followed by ``record-count`` records of 16 bytes each:
    timestamp u64 (ps), channel u16, 6 reserved zero bytes.

The channel map is a JSON sidecar keyed by channel id with fields
``party`` (A|B), ``arm`` (TOA|TSUP) and ``outcome`` (H|V for TOA, D|A for
TSUP).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import (
    MalformedHeader,
    NoPeak,
    NonMonotonicTimestamp,
    TruncatedRecord,
)

TTAG_MAGIC = b"TTAG"
TTAG_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("channel", "<u2"), ("reserved", "V6")])
_RECORD_SIZE = _RECORD_DTYPE.itemsize


def _greedy_sweep_py(ia: np.ndarray, ib: np.ndarray, na: int, nb: int) -> np.ndarray:
    """Accept candidates in priority order, each event at most once."""
    ia_l = ia.tolist()
    ib_l = ib.tolist()
    used_a = bytearray(na)
    used_b = bytearray(nb)
    kept: list[int] = []
    push = kept.append
    for k in range(len(ia_l)):
        a = ia_l[k]
        if used_a[a]:
            continue
        b = ib_l[k]
        if used_b[b]:
            continue
        used_a[a] = 1
        used_b[b] = 1
        push(k)
    return np.asarray(kept, dtype=np.int64)


try:  # optional compiled sweep, same semantics as the Python fallback
    from numba import njit as _njit

    @_njit(cache=True)
    def _greedy_sweep_numba(ia, ib, na, nb):  # pragma: no cover - thin jit shim
        used_a = np.zeros(na, np.uint8)
        used_b = np.zeros(nb, np.uint8)
        kept = np.empty(ia.size, np.int64)
        n = 0
        for k in range(ia.size):
            a = ia[k]
            if used_a[a]:
                continue
            b = ib[k]
            if used_b[b]:
                continue
            used_a[a] = 1
            used_b[b] = 1
            kept[n] = k
            n += 1
        return kept[:n]

    def _greedy_sweep(ia, ib, na, nb):
        return _greedy_sweep_numba(np.ascontiguousarray(ia), np.ascontiguousarray(ib), na, nb)

except ImportError:  # pragma: no cover - exercised only without numba
    _greedy_sweep = _greedy_sweep_py

PARTIES = ("A", "B")
ARMS = ("TOA", "TSUP")
ARM_OUTCOMES = {"TOA": ("H", "V"), "TSUP": ("D", "A")}


@dataclass(frozen=True)
class DetectionEvent:
    """One time-stamped detector click."""

    timestamp: int  # picoseconds since stream epoch, non-negative
    channel: int


@dataclass(frozen=True)
class ChannelRole:
    """Physical meaning of one channel id."""

    party: str   # "A" | "B"
    arm: str     # "TOA" | "TSUP"
    outcome: str  # "H"/"V" for TOA, "D"/"A" for TSUP


class ChannelMap:
    """Mapping from channel ids to (party, arm, outcome) roles.

    Each party must expose exactly the four channels TOA-H, TOA-V, TSUP-D,
    TSUP-A, and no role may be claimed by two channel ids.
    """

    def __init__(self, roles: dict[int, ChannelRole]):
        seen: dict[tuple[str, str, str], int] = {}
        for ch, role in roles.items():
            if role.party not in PARTIES:
                raise ValueError(f"channel {ch}: unknown party {role.party!r}")
            if role.arm not in ARMS:
                raise ValueError(f"channel {ch}: unknown arm {role.arm!r}")
            if role.outcome not in ARM_OUTCOMES[role.arm]:
                raise ValueError(
                    f"channel {ch}: outcome {role.outcome!r} invalid for arm {role.arm}"
                )
            key = (role.party, role.arm, role.outcome)
            if key in seen:
                raise ValueError(f"role {key} mapped to both channel {seen[key]} and {ch}")
            seen[key] = ch
        for party in PARTIES:
            have = sorted(k[1:] for k in seen if k[0] == party)
            want = sorted((arm, out) for arm in ARMS for out in ARM_OUTCOMES[arm])
            if have != want:
                raise ValueError(f"party {party} must map exactly TOA-H/V and TSUP-D/A")
        self.roles = dict(roles)
        self._by_role = seen

    @classmethod
    def default(cls) -> "ChannelMap":
        """Conventional layout: A on channels 0-3, B on 4-7."""
        roles = {}
        ch = 0
        for party in PARTIES:
            for arm in ARMS:
                for outcome in ARM_OUTCOMES[arm]:
                    roles[ch] = ChannelRole(party, arm, outcome)
                    ch += 1
        return cls(roles)

    def channel(self, party: str, arm: str, outcome: str) -> int:
        return self._by_role[(party, arm, outcome)]

    def channels_of(self, party: str) -> list[int]:
        return sorted(ch for ch, r in self.roles.items() if r.party == party)

    def max_channel(self) -> int:
        return max(self.roles)

    def to_json(self) -> str:
        doc = {
            str(ch): {"party": r.party, "arm": r.arm, "outcome": r.outcome}
            for ch, r in sorted(self.roles.items())
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ChannelMap":
        doc = json.loads(text)
        roles = {
            int(ch): ChannelRole(entry["party"], entry["arm"], entry["outcome"])
            for ch, entry in doc.items()
        }
        return cls(roles)


class EventStream:
    """Time-ordered detector clicks as columnar arrays."""

    __slots__ = ("timestamps", "channels")

    def __init__(self, timestamps: np.ndarray, channels: np.ndarray):
        timestamps = np.asarray(timestamps, dtype=np.int64)
        channels = np.asarray(channels, dtype=np.uint16)
        if timestamps.shape != channels.shape:
            raise ValueError("timestamps and channels must have equal length")
        self.timestamps = timestamps
        self.channels = channels

    def __len__(self) -> int:
        return self.timestamps.size

    def __getitem__(self, i: int) -> DetectionEvent:
        return DetectionEvent(int(self.timestamps[i]), int(self.channels[i]))

    def __iter__(self) -> Iterator[DetectionEvent]:
        for t, c in zip(self.timestamps, self.channels):
            yield DetectionEvent(int(t), int(c))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return np.array_equal(self.timestamps, other.timestamps) and np.array_equal(
            self.channels, other.channels
        )

    def shifted(self, delta_ps: int) -> "EventStream":
        return EventStream(self.timestamps + int(delta_ps), self.channels)


def serialize_stream(stream: EventStream, channel_count: int = 8) -> bytes:
    """Encode a stream in the TTAG container format."""
    n = len(stream)
    if n and int(stream.timestamps.min()) < 0:
        raise ValueError("cannot serialize negative timestamps")
    header = _HEADER.pack(TTAG_MAGIC, TTAG_VERSION, channel_count, n)
    records = np.zeros(n, dtype=_RECORD_DTYPE)
    records["timestamp"] = stream.timestamps.astype(np.uint64)
    records["channel"] = stream.channels
    return header + records.tobytes()


def parse_stream(data: bytes) -> EventStream:
    """Decode a TTAG byte string into a time-ordered event stream.

    Raises MalformedHeader, TruncatedRecord or NonMonotonicTimestamp on
    invalid input; equal consecutive timestamps are accepted.
    """
    if len(data) < _HEADER.size:
        raise MalformedHeader(f"header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, _channel_count, record_count = _HEADER.unpack_from(data)
    if magic != TTAG_MAGIC:
        raise MalformedHeader(f"bad magic {magic!r}")
    if version != TTAG_VERSION:
        raise MalformedHeader(f"unsupported version {version}")
    payload = len(data) - _HEADER.size
    if payload != record_count * _RECORD_SIZE:
        raise TruncatedRecord(
            f"header promises {record_count} records "
            f"({record_count * _RECORD_SIZE} bytes), payload has {payload}"
        )
    records = np.frombuffer(data, dtype=_RECORD_DTYPE, count=record_count, offset=_HEADER.size)
    ts = records["timestamp"]
    if record_count and int(ts.max()) > np.iinfo(np.int64).max:
        raise TruncatedRecord("timestamp exceeds signed 64-bit range")
    ts = ts.astype(np.int64)
    if record_count > 1 and bool(np.any(np.diff(ts) < 0)):
        bad = int(np.flatnonzero(np.diff(ts) < 0)[0]) + 1
        raise NonMonotonicTimestamp(f"timestamp decreases at record {bad}")
    return EventStream(ts, records["channel"].copy())


def read_stream(path) -> EventStream:
    with open(path, "rb") as fh:
        return parse_stream(fh.read())


def write_stream(path, stream: EventStream, channel_count: int = 8) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_stream(stream, channel_count))


def estimate_offset(
    stream_a: EventStream,
    stream_b: EventStream,
    search_half_width: int,
    hist_bin: int,
    decimate: int = 1,
) -> int:
    """Estimate the constant clock offset of stream B relative to stream A.

    Histograms pairwise time differences ``tB - tA`` restricted to
    ``±search_half_width`` (stream A decimated to every ``decimate``-th
    event to bound memory) and returns the center of the peak bin. The
    peak must exceed mean + 5 std of the remaining bins, otherwise NoPeak
    is raised.
    """
    if len(stream_a) == 0 or len(stream_b) == 0:
        raise ValueError("offset estimation needs nonempty streams")
    if not (0 < hist_bin <= search_half_width):
        raise ValueError("require 0 < hist_bin <= search_half_width")
    if decimate < 1:
        raise ValueError("decimate must be >= 1")

    ta = stream_a.timestamps[::decimate]
    tb = stream_b.timestamps
    lo = np.searchsorted(tb, ta - search_half_width, side="left")
    hi = np.searchsorted(tb, ta + search_half_width, side="left")
    counts = hi - lo
    total = int(counts.sum())
    nbins = int(-(-2 * search_half_width // hist_bin))
    if total == 0:
        raise NoPeak("no pairwise differences inside the search range")

    csum = np.concatenate(([0], np.cumsum(counts)))
    flat_b = np.repeat(lo, counts) + (np.arange(total) - np.repeat(csum[:-1], counts))
    diffs = tb[flat_b] - np.repeat(ta, counts)
    hist = np.bincount((diffs + search_half_width) // hist_bin, minlength=nbins)

    peak = int(np.argmax(hist))
    rest = np.delete(hist, peak)
    threshold = rest.mean() + 5.0 * rest.std()
    if hist[peak] == 0 or hist[peak] <= threshold:
        raise NoPeak(
            f"peak bin count {hist[peak]} not above mean+5*std={threshold:.1f} "
            "of remaining bins"
        )
    return int(-search_half_width + peak * hist_bin + hist_bin // 2)


@dataclass(frozen=True)
class CoincidencePair:
    """One matched pair; event_b carries the offset-corrected timestamp."""

    event_a: DetectionEvent
    event_b: DetectionEvent
    delta: int  # tB - tA after offset correction, ps


class CoincidenceBatch:
    """Matched coincidence pairs in columnar form.

    ``time_b``/``channel_b`` hold the offset-corrected B-side events, so
    downstream framing sees both parties on a common clock.
    """

    __slots__ = ("time_a", "channel_a", "time_b", "channel_b", "delta")

    def __init__(self, time_a, channel_a, time_b, channel_b):
        self.time_a = np.asarray(time_a, dtype=np.int64)
        self.channel_a = np.asarray(channel_a, dtype=np.uint16)
        self.time_b = np.asarray(time_b, dtype=np.int64)
        self.channel_b = np.asarray(channel_b, dtype=np.uint16)
        self.delta = self.time_b - self.time_a

    @classmethod
    def empty(cls) -> "CoincidenceBatch":
        return cls([], [], [], [])

    def __len__(self) -> int:
        return self.time_a.size

    def __getitem__(self, i: int) -> CoincidencePair:
        return CoincidencePair(
            DetectionEvent(int(self.time_a[i]), int(self.channel_a[i])),
            DetectionEvent(int(self.time_b[i]), int(self.channel_b[i])),
            int(self.delta[i]),
        )

    def __iter__(self) -> Iterator[CoincidencePair]:
        for i in range(len(self)):
            yield self[i]

    def concat(self, other: "CoincidenceBatch") -> "CoincidenceBatch":
        return CoincidenceBatch(
            np.concatenate([self.time_a, other.time_a]),
            np.concatenate([self.channel_a, other.channel_a]),
            np.concatenate([self.time_b, other.time_b]),
            np.concatenate([self.channel_b, other.channel_b]),
        )


def match_coincidences(
    stream_a: EventStream,
    stream_b: EventStream,
    offset: int,
    window: int,
) -> CoincidenceBatch:
    """Greedily pair A and B events whose corrected time difference is
    within ``±window``.

    B timestamps are first corrected by ``tB - offset``. Candidates are
    consumed in order of increasing ``|delta|``; ties go to the earlier B
    event, then the earlier A event, so the result is deterministic and
    each event appears in at most one pair.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    na, nb = len(stream_a), len(stream_b)
    if na == 0 or nb == 0:
        return CoincidenceBatch.empty()

    ta = stream_a.timestamps
    tb = stream_b.timestamps - int(offset)
    lo = np.searchsorted(tb, ta - window, side="left")
    hi = np.searchsorted(tb, ta + window, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        return CoincidenceBatch.empty()

    csum = np.concatenate(([0], np.cumsum(counts)))
    ia = np.repeat(np.arange(na), counts)
    ib = np.repeat(lo, counts) + (np.arange(total) - np.repeat(csum[:-1], counts))
    abs_delta = np.abs(tb[ib] - ta[ia])

    # greedy priority: smallest |delta|, then earlier B, then earlier A;
    # the three keys pack into one word whenever the widths allow it
    bits_a = max(int(na - 1).bit_length(), 1)
    bits_b = max(int(nb - 1).bit_length(), 1)
    bits_d = int(window).bit_length()
    if bits_a + bits_b + bits_d <= 62:
        key = (abs_delta << (bits_a + bits_b)) | (ib << bits_a) | ia
        order = np.argsort(key)  # keys are unique, stability irrelevant
    else:
        order = np.lexsort((ia, ib, abs_delta))

    kept = _greedy_sweep(ia[order], ib[order], na, nb)
    sel = order[kept]
    sel = sel[np.argsort(ia[sel])]
    return CoincidenceBatch(
        ta[ia[sel]], stream_a.channels[ia[sel]], tb[ib[sel]], stream_b.channels[ib[sel]]
    )


def match_coincidences_chunked(
    stream_a: EventStream,
    stream_b: EventStream,
    offset: int,
    window: int,
    n_chunks: int,
    margin: int | None = None,
) -> CoincidenceBatch:
    """Chunked variant of :func:`match_coincidences` over disjoint A-time
    ranges with overlap ``margin`` (default: the window itself).

    Each chunk matches the events of its padded range and keeps only pairs
    whose A event lies in the chunk core; the merge reproduces the
    single-pass result provided greedy decision chains stay shorter than
    the margin, which holds for generically spaced data.
    """
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    if margin is None:
        margin = window
    if margin < window:
        raise ValueError("margin must be at least the coincidence window")
    na = len(stream_a)
    if na == 0 or len(stream_b) == 0 or n_chunks == 1:
        return match_coincidences(stream_a, stream_b, offset, window)

    ta = stream_a.timestamps
    tb = stream_b.timestamps - int(offset)
    t0, t1 = int(ta[0]), int(ta[-1]) + 1
    edges = np.linspace(t0, t1, n_chunks + 1).astype(np.int64)
    out = CoincidenceBatch.empty()
    for c0, c1 in zip(edges[:-1], edges[1:]):
        a_lo = np.searchsorted(ta, c0 - margin, side="left")
        a_hi = np.searchsorted(ta, c1 + margin, side="left")
        b_lo = np.searchsorted(tb, c0 - 2 * margin, side="left")
        b_hi = np.searchsorted(tb, c1 + 2 * margin, side="left")
        sub = match_coincidences(
            EventStream(ta[a_lo:a_hi], stream_a.channels[a_lo:a_hi]),
            EventStream(
                tb[b_lo:b_hi] + int(offset), stream_b.channels[b_lo:b_hi]
            ),
            offset,
            window,
        )
        keep = (sub.time_a >= c0) & (sub.time_a < c1)
        out = out.concat(
            CoincidenceBatch(
                sub.time_a[keep], sub.channel_a[keep], sub.time_b[keep], sub.channel_b[keep]
            )
        )
    return out
