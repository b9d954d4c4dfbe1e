"""Two-tier ground-truth synthesis for the certification pipeline.

Tier A (:func:`exact_probability_tables`) evaluates the discretised state
model -- a visibility-weighted mixture of the d=4 maximally entangled
state and white noise -- to exact outcome probabilities. It is the oracle
for the certification math.

Tier B (:func:`generate_streams`) emits realistic TTAG time-tag streams:
Poisson pair emission, beam-splitter arm choice, exact joint sampling of
measurement outcomes from the same state model, detector jitter, loss,
uniform background clicks and a clock offset on the remote side. Because
outcomes are drawn from the exact joint distribution rather than from a
path-level interferometer model, Tier B statistics converge to Tier A by
construction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .certify import ProbabilityTables
from .framing import D, FrameConfig
from .timetag import ARM_OUTCOMES, ChannelMap, EventStream

# One generation segment spans about a second; segment boundaries sit on
# interval edges so per-segment seeding is independent of total duration.
_SEGMENT_SALT = 0x7B5
_LOST = 8  # outcome code for a superposition photon outside the 8 projectors


@dataclass(frozen=True)
class SourceModel:
    """Parametric model of the source, the channel and the detectors."""

    visibility: float = 1.0        # weight of the entangled state vs white noise
    pair_rate: float = 1000.0      # detected pair emissions per second
    background_rate: float = 0.0   # uncorrelated clicks per detector per second
    jitter_sigma: float = 0.0      # Gaussian timing jitter per detection, ps
    loss_a: float = 0.0            # probability of losing an A photon
    loss_b: float = 0.0
    clock_offset: int = 0          # added to every B timestamp, ps
    duration: float = 1.0          # seconds
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError("visibility must lie in [0, 1]")
        for name in ("pair_rate", "background_rate", "jitter_sigma", "duration"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("loss_a", "loss_b"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def ground_truth_fidelity(model: SourceModel) -> float:
    """Exact fidelity of the model state to the maximally entangled state."""
    v = model.visibility
    return v + (1.0 - v) / (D * D)


def _tsup_vectors() -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors and weights of the superposition POVM on a 5-dim space
    (slots 0..3 plus the primed bin as an orthogonal 5th direction)."""
    vecs = np.zeros((9, 5))
    for pair in range(4):
        hi = pair + 1 if pair < 3 else 4  # pair 3 superposes slot 3 and primed
        for s, sign in enumerate((+1.0, -1.0)):
            v = np.zeros(5)
            v[pair] = 1.0
            v[hi] = sign
            vecs[2 * pair + s] = v / np.sqrt(2.0)
    vecs[_LOST, 0] = 1.0  # residual effect (1/2)|0><0| of the deficient POVM
    weights = np.full(9, 0.5)
    return vecs, weights


def _joint_probability(u_a, w_a, u_b, w_b, v: float) -> float:
    """Tr[rho (w_a |u_a><u_a| (x) w_b |u_b><u_b|)] for the model state."""
    pa = u_a[:4]
    pb = u_b[:4]
    amp = 0.5 * float(pa @ pb)  # overlap with the maximally entangled state
    white = float(pa @ pa) * float(pb @ pb) / 16.0
    return w_a * w_b * (v * amp * amp + (1.0 - v) * white)


def exact_probability_tables(model: SourceModel, cfg: FrameConfig) -> ProbabilityTables:
    """Tier A: exact outcome probabilities of the discretised state.

    Arrival-time entries are ``<ij|rho|ij>``; superposition entries are the
    exact projector-pair expectations with the primed bin treated as
    orthogonal to the frame space. Only the noiseless-background branch of
    the model is defined here.
    """
    if model.background_rate != 0.0:
        raise ValueError("exact tables are defined for background_rate = 0 only")
    v = model.visibility
    toa = np.full((D, D), (1.0 - v) / 16.0)
    toa[np.diag_indices(D)] += v / 4.0

    vecs, _ = _tsup_vectors()
    tsup = np.empty((2 * D, 2 * D))
    for a in range(2 * D):
        for b in range(2 * D):
            tsup[a, b] = _joint_probability(vecs[a], 1.0, vecs[b], 1.0, v)
    return ProbabilityTables(toa=toa, tsup=tsup)


def _joint_outcome_tables(v: float) -> dict[tuple[int, int], np.ndarray]:
    """Exact joint click distributions for each (arm A, arm B) combination.

    Arrival-time outcomes are the 4 slots; superposition outcomes are the
    8 projectors plus a lost-photon residual. Every table sums to one.
    """
    vecs, weights = _tsup_vectors()
    eye = np.eye(5)[:4]
    effects = {
        0: (eye, np.ones(4)),        # complete arrival-time measurement
        1: (vecs, weights),          # superposition POVM incl. residual
    }
    tables = {}
    for arm_a in (0, 1):
        ua, wa = effects[arm_a]
        for arm_b in (0, 1):
            ub, wb = effects[arm_b]
            tab = np.empty((len(ua), len(ub)))
            for a in range(len(ua)):
                for b in range(len(ub)):
                    tab[a, b] = _joint_probability(ua[a], wa[a], ub[b], wb[b], v)
            total = tab.sum()
            assert abs(total - 1.0) < 1e-12, "joint outcome table must be normalized"
            tables[(arm_a, arm_b)] = tab.ravel()
    return tables


def _segment_plan(model: SourceModel, cfg: FrameConfig) -> tuple[int, int]:
    total_intervals = int(-(-model.duration * 1e12 // cfg.interval_ps))
    per_segment = max(1, int(1e12 // cfg.interval_ps))
    return total_intervals, per_segment


def _click_times(arm, outcome, base, within, tau):
    """Realize sampled outcomes as click times; lost photons get time -1.

    Arrival-time outcome k clicks in slot k. A superposition projector
    (pair, sign) clicks in slot pair+1: the click bin is the later of the
    two superposed bins, and for pair 3 that is the primed bin, i.e. slot 0
    of the next interval. Within-bin offsets are preserved exactly by the
    interferometer delay.
    """
    t = np.where(
        arm == 0,
        base + outcome * tau + within,
        base + ((np.minimum(outcome, 7) >> 1) + 1) * tau + within,
    )
    return np.where((arm == 1) & (outcome == _LOST), -1, t)


def generate_streams(
    model: SourceModel, cfg: FrameConfig, channels: ChannelMap | None = None
) -> tuple[EventStream, EventStream]:
    """Tier B: synthesize a pair of TTAG-ready event streams.

    Fully deterministic for a fixed model seed: generation runs in
    interval-aligned segments with per-segment derived seeds, so output is
    independent of how segments would be scheduled.
    """
    if channels is None:
        channels = ChannelMap.default()
    tau = cfg.tau_mzi
    period = cfg.interval_ps
    joint = _joint_outcome_tables(model.visibility)
    outcome_counts = {0: 4, 1: 9}

    ch_lut = {
        (party_i, arm_i, out_i): channels.channel(party, arm, outcome)
        for party_i, party in enumerate(("A", "B"))
        for arm_i, arm in enumerate(("TOA", "TSUP"))
        for out_i, outcome in enumerate(ARM_OUTCOMES[arm])
    }

    total_intervals, per_segment = _segment_plan(model, cfg)
    times = {0: [], 1: []}
    chans = {0: [], 1: []}
    for seg_start in range(0, total_intervals, per_segment):
        seg_end = min(seg_start + per_segment, total_intervals)
        seg_seconds = (seg_end - seg_start) * period * 1e-12
        rng = np.random.default_rng(
            np.random.SeedSequence((model.seed, _SEGMENT_SALT, seg_start))
        )

        n_pairs = int(rng.poisson(model.pair_rate * seg_seconds))
        interval = rng.integers(seg_start, seg_end, n_pairs)
        within = rng.integers(0, tau, n_pairs)
        arm_a = rng.integers(0, 2, n_pairs)
        arm_b = rng.integers(0, 2, n_pairs)
        pol = rng.integers(0, 2, n_pairs)

        out_a = np.zeros(n_pairs, dtype=np.int64)
        out_b = np.zeros(n_pairs, dtype=np.int64)
        for combo in ((0, 0), (0, 1), (1, 0), (1, 1)):
            mask = (arm_a == combo[0]) & (arm_b == combo[1])
            count = int(mask.sum())
            if count == 0:
                continue
            flat = rng.choice(joint[combo].size, size=count, p=joint[combo])
            out_a[mask], out_b[mask] = np.divmod(flat, outcome_counts[combo[1]])

        keep_a = rng.random(n_pairs) >= model.loss_a
        keep_b = rng.random(n_pairs) >= model.loss_b
        jit_a = np.rint(rng.normal(0.0, model.jitter_sigma, n_pairs)).astype(np.int64) \
            if model.jitter_sigma > 0 else np.zeros(n_pairs, dtype=np.int64)
        jit_b = np.rint(rng.normal(0.0, model.jitter_sigma, n_pairs)).astype(np.int64) \
            if model.jitter_sigma > 0 else np.zeros(n_pairs, dtype=np.int64)

        base = interval * period
        for side, arm, out, keep, jit in (
            (0, arm_a, out_a, keep_a, jit_a),
            (1, arm_b, out_b, keep_b, jit_b),
        ):
            t = _click_times(arm, out, base, within, tau)
            alive = keep & (t >= 0)
            t = t[alive] + jit[alive]
            if side == 1:
                t = t + int(model.clock_offset)
            sign_code = np.minimum(out[alive], 7) & 1  # 0 for +, 1 for -
            if cfg.plus_detector != "D":
                sign_code = 1 - sign_code
            det = np.where(arm[alive] == 0, pol[alive], sign_code)
            ch = np.empty(t.size, dtype=np.uint16)
            for arm_i in (0, 1):
                for out_i in (0, 1):
                    sel = (arm[alive] == arm_i) & (det == out_i)
                    ch[sel] = ch_lut[(side, arm_i, out_i)]
            times[side].append(t)
            chans[side].append(ch)

        if model.background_rate > 0:
            seg_t0 = seg_start * period
            seg_t1 = seg_end * period
            for side, party in enumerate(("A", "B")):
                for channel in channels.channels_of(party):
                    n_bg = int(rng.poisson(model.background_rate * seg_seconds))
                    t_bg = rng.integers(seg_t0, seg_t1, n_bg)
                    if side == 1:
                        t_bg = t_bg + int(model.clock_offset)
                    times[side].append(t_bg)
                    chans[side].append(np.full(n_bg, channel, dtype=np.uint16))

    duration_ps = int(round(model.duration * 1e12))
    streams = []
    for side in (0, 1):
        t = np.concatenate(times[side]) if times[side] else np.empty(0, np.int64)
        c = np.concatenate(chans[side]) if chans[side] else np.empty(0, np.uint16)
        # each recorder covers [0, duration) in its own clock; jitter, slot
        # realization or the clock offset can push clicks outside that span
        ok = (t >= 0) & (t < duration_ps)
        t, c = t[ok], c[ok]
        order = np.lexsort((c, t))
        streams.append(EventStream(t[order], c[order]))
    return streams[0], streams[1]


def manifest(model: SourceModel, cfg: FrameConfig, files: dict[str, str]) -> str:
    """JSON record of the generating model, for oracle comparisons."""
    doc = {
        "model": asdict(model),
        "frame_config": {
            "delta_t": cfg.delta_t,
            "tau_mzi": cfg.tau_mzi,
            "d": cfg.d,
            "window": cfg.window,
            "policy": cfg.policy.value,
            "seed": cfg.seed,
            "plus_detector": cfg.plus_detector,
        },
        "ground_truth_fidelity": ground_truth_fidelity(model),
        "files": files,
    }
    return json.dumps(doc, indent=2)
