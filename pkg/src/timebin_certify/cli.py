"""Command-line pipeline: simulate streams, analyze them into per-block
certificates, sweep bin lengths, or estimate the clock offset.

Exit codes: 0 success, 2 configuration error, 3 I/O error. The environment
variable ``TIMEBIN_CERTIFY_THREADS`` caps block-level parallelism.
"""
from __future__ import annotations

import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np

from . import certify, framing, sim, timetag
from .errors import EmptySetting, NoPeak, TimebinError

DEFAULT_OFFSET_SEARCH = 10_000_000  # ps
DEFAULT_OFFSET_HIST_BIN = 500       # ps
_OFFSET_SAMPLE_TARGET = 100_000     # decimate offset estimation to about this many events

IO_EXIT = 3


def _threads() -> int:
    cap = os.environ.get("TIMEBIN_CERTIFY_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            raise click.UsageError("TIMEBIN_CERTIFY_THREADS must be an integer")
    return min(8, os.cpu_count() or 1)


@dataclass(frozen=True)
class BlockResult:
    """Per-(block, delta_t) outcome: a certificate or a diagnostic error."""

    block_index: int
    block_start_ps: int
    block_len_ps: int
    delta_t_ps: int
    certificate: Optional[certify.Certificate] = None
    error: Optional[str] = None

    def to_json_dict(self) -> dict:
        if self.certificate is not None:
            return self.certificate.to_json_dict()
        return {
            "delta_t_ps": int(self.delta_t_ps),
            "block_index": int(self.block_index),
            "block_start_ps": int(self.block_start_ps),
            "block_len_ps": int(self.block_len_ps),
            "F_cf": None,
            "F_sdp": None,
            "schmidt_number": None,
            "stderr": None,
            "diagnostics": {"error": self.error},
        }


def estimate_stream_offset(
    stream_a: timetag.EventStream,
    stream_b: timetag.EventStream,
    search_half_width: int = DEFAULT_OFFSET_SEARCH,
    hist_bin: int = DEFAULT_OFFSET_HIST_BIN,
) -> int:
    """Offset estimation with automatic decimation for long streams."""
    decimate = max(1, len(stream_a) // _OFFSET_SAMPLE_TARGET)
    return timetag.estimate_offset(
        stream_a, stream_b, search_half_width, hist_bin, decimate=decimate
    )


def analyze_streams(
    stream_a: timetag.EventStream,
    stream_b: timetag.EventStream,
    channels: timetag.ChannelMap,
    delta_t_list: Sequence[int],
    tau_mzi: int = 2700,
    window: Optional[int] = None,
    block_seconds: float = 200.0,
    offset: Optional[int] = None,
    policy: framing.MultiClickPolicy = framing.MultiClickPolicy.RANDOM_OUTCOME,
    seed: int = 0,
    bootstrap_resamples: int = 0,
    offset_search: int = DEFAULT_OFFSET_SEARCH,
    offset_hist_bin: int = DEFAULT_OFFSET_HIST_BIN,
    threads: Optional[int] = None,
) -> list[BlockResult]:
    """Certify every (time block, bin length) combination of two streams.

    Coincidence matching runs once per block and is reused across all bin
    lengths, since the pairing depends only on the window. Results are
    deterministic for fixed inputs and seed, independent of thread count.
    """
    configs = [
        framing.FrameConfig(
            delta_t=dt, tau_mzi=tau_mzi, window=window, policy=policy, seed=seed
        )
        for dt in delta_t_list
    ]
    if not configs:
        raise ValueError("need at least one delta_t value")
    win = configs[0].window
    block_ps = int(round(block_seconds * 1e12))
    if block_ps <= 0:
        raise ValueError("block length must be positive")

    offset_error: Optional[str] = None
    if offset is None:
        try:
            offset = estimate_stream_offset(stream_a, stream_b, offset_search, offset_hist_bin)
        except (NoPeak, ValueError) as exc:
            offset_error = f"NoPeak: {exc}" if isinstance(exc, NoPeak) else str(exc)
            offset = 0

    if len(stream_a) == 0 and len(stream_b) == 0:
        return []
    t_end = 0
    if len(stream_a):
        t_end = max(t_end, int(stream_a.timestamps[-1]) + 1)
    if len(stream_b):
        t_end = max(t_end, int(stream_b.timestamps[-1]) - int(offset) + 1)
    n_blocks = max(1, -(-t_end // block_ps))

    ta = stream_a.timestamps
    tb_corr = stream_b.timestamps - int(offset)

    def run_block(index: int) -> list[BlockResult]:
        b0 = index * block_ps
        b1 = b0 + block_ps
        if offset_error is not None:
            return [
                BlockResult(index, b0, block_ps, cfg.delta_t, error=offset_error)
                for cfg in configs
            ]
        a_lo, a_hi = np.searchsorted(ta, [b0, b1])
        b_lo, b_hi = np.searchsorted(tb_corr, [b0 - win, b1 + win])
        sub_a = timetag.EventStream(ta[a_lo:a_hi], stream_a.channels[a_lo:a_hi])
        sub_b = timetag.EventStream(
            stream_b.timestamps[b_lo:b_hi], stream_b.channels[b_lo:b_hi]
        )
        pairs = timetag.match_coincidences(sub_a, sub_b, offset, win)
        results = []
        for cfg in configs:
            try:
                tables = framing.accumulate_tables(pairs, channels, cfg)
                cert = certify.certify_counts(
                    tables,
                    delta_t_ps=cfg.delta_t,
                    window_ps=cfg.window,
                    policy=cfg.policy.value,
                    block_index=index,
                    block_start_ps=b0,
                    block_len_ps=block_ps,
                    bootstrap_resamples=bootstrap_resamples,
                    bootstrap_seed=_block_seed(seed, index),
                )
                results.append(
                    BlockResult(index, b0, block_ps, cfg.delta_t, certificate=cert)
                )
            except EmptySetting as exc:
                results.append(
                    BlockResult(
                        index, b0, block_ps, cfg.delta_t, error=f"EmptySetting: {exc}"
                    )
                )
        return results

    workers = threads if threads is not None else _threads()
    if workers <= 1 or n_blocks == 1:
        nested = [run_block(i) for i in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            nested = list(pool.map(run_block, range(n_blocks)))
    return [res for block in nested for res in block]


def _block_seed(seed: int, block_index: int) -> int:
    return int(np.random.SeedSequence((seed, 0xB10C, block_index)).generate_state(1)[0])


def _analysis_csv(results: list[BlockResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)  # RFC 4180: CRLF line endings, minimal quoting
    writer.writerow(["block_start", "F_cf", "F_sdp", "schmidt_number", "stderr"])
    for res in sorted(results, key=lambda r: (r.block_index, r.delta_t_ps)):
        doc = res.to_json_dict()
        writer.writerow(
            [
                doc["block_start_ps"],
                _csv_num(doc["F_cf"]),
                _csv_num(doc["F_sdp"]),
                "" if doc["schmidt_number"] is None else doc["schmidt_number"],
                _csv_num(doc["stderr"]),
            ]
        )
    return buf.getvalue()


def _sweep_csv(results: list[BlockResult], delta_ts: Sequence[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["block_start"] + [f"F_sdp_{dt}" for dt in delta_ts])
    by_block: dict[int, dict[int, BlockResult]] = {}
    for res in results:
        by_block.setdefault(res.block_index, {})[res.delta_t_ps] = res
    for index in sorted(by_block):
        row_map = by_block[index]
        start = next(iter(row_map.values())).block_start_ps
        row = [start]
        for dt in delta_ts:
            doc = row_map[dt].to_json_dict() if dt in row_map else {"F_sdp": None}
            row.append(_csv_num(doc["F_sdp"]))
        writer.writerow(row)
    return buf.getvalue()


def _csv_num(x) -> str:
    return "" if x is None else f"{x:.12g}"


def _results_json(results: list[BlockResult]) -> str:
    ordered = sorted(results, key=lambda r: (r.block_index, r.delta_t_ps))
    return json.dumps([r.to_json_dict() for r in ordered], indent=2)


def _write_output(text: str, out: str) -> None:
    if out == "-":
        click.echo(text, nl=not text.endswith("\n"))
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        click.echo(f"error: cannot write {out}: {exc}", err=True)
        sys.exit(IO_EXIT)


def _read_stream(path: str) -> timetag.EventStream:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        click.echo(f"error: cannot read {path}: {exc}", err=True)
        sys.exit(IO_EXIT)
    try:
        return timetag.parse_stream(data)
    except TimebinError as exc:
        click.echo(f"error: {path}: {exc}", err=True)
        sys.exit(IO_EXIT)


def _read_channel_map(path: str) -> timetag.ChannelMap:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        click.echo(f"error: cannot read {path}: {exc}", err=True)
        sys.exit(IO_EXIT)
    try:
        return timetag.ChannelMap.from_json(text)
    except (ValueError, KeyError) as exc:
        raise click.UsageError(f"invalid channel map {path}: {exc}")


def _parse_policy(name: str) -> framing.MultiClickPolicy:
    return framing.MultiClickPolicy(name)


def _validate_frame_geometry(delta_ts: Sequence[int], tau_mzi: int) -> None:
    for dt in delta_ts:
        if dt <= 0 or tau_mzi % dt != 0:
            raise click.UsageError(
                f"--delta-t {dt} must be a positive divisor of --tau-mzi {tau_mzi}"
            )


@click.group()
def main():
    """Time-bin entanglement certification pipeline."""


@main.command()
@click.option("--v", "visibility", type=float, default=1.0, show_default=True,
              help="Entangled-state weight against white noise.")
@click.option("--pairs-per-s", type=float, default=1000.0, show_default=True)
@click.option("--background-per-s", type=float, default=0.0, show_default=True,
              help="Uncorrelated clicks per detector per second.")
@click.option("--jitter-sigma", type=float, default=0.0, show_default=True,
              help="Detector timing jitter, ps.")
@click.option("--loss-a", type=float, default=0.0, show_default=True)
@click.option("--loss-b", type=float, default=0.0, show_default=True)
@click.option("--clock-offset", type=int, default=0, show_default=True,
              help="Clock offset applied to the B stream, ps.")
@click.option("--duration", type=float, required=True, help="Seconds of data.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--delta-t", type=int, default=540, show_default=True)
@click.option("--tau-mzi", type=int, default=2700, show_default=True)
@click.option("--out", type=str, default=".", show_default=True,
              help="Output directory for TTAG files, channel map and manifest.")
def simulate(visibility, pairs_per_s, background_per_s, jitter_sigma, loss_a,
             loss_b, clock_offset, duration, seed, delta_t, tau_mzi, out):
    """Synthesize a two-party time-tag data set."""
    _validate_frame_geometry([delta_t], tau_mzi)
    try:
        model = sim.SourceModel(
            visibility=visibility,
            pair_rate=pairs_per_s,
            background_rate=background_per_s,
            jitter_sigma=jitter_sigma,
            loss_a=loss_a,
            loss_b=loss_b,
            clock_offset=clock_offset,
            duration=duration,
            seed=seed,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    cfg = framing.FrameConfig(delta_t=delta_t, tau_mzi=tau_mzi, seed=seed)
    channels = timetag.ChannelMap.default()
    stream_a, stream_b = sim.generate_streams(model, cfg, channels)

    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {
            "stream_a": "alice.ttag",
            "stream_b": "bob.ttag",
            "channel_map": "channel_map.json",
        }
        timetag.write_stream(out_dir / files["stream_a"], stream_a)
        timetag.write_stream(out_dir / files["stream_b"], stream_b)
        (out_dir / files["channel_map"]).write_text(channels.to_json())
        (out_dir / "manifest.json").write_text(sim.manifest(model, cfg, files))
    except OSError as exc:
        click.echo(f"error: cannot write to {out}: {exc}", err=True)
        sys.exit(IO_EXIT)
    click.echo(
        f"wrote {len(stream_a)} A events and {len(stream_b)} B events to {out_dir}",
        err=True,
    )


_shared_analysis_options = [
    click.option("--input-a", required=True, type=str, help="Party A TTAG file."),
    click.option("--input-b", required=True, type=str, help="Party B TTAG file."),
    click.option("--channel-map", required=True, type=str),
    click.option("--tau-mzi", type=int, default=2700, show_default=True),
    click.option("--window", type=int, default=None,
                 help="Coincidence window, ps [default: 4*tau-mzi]."),
    click.option("--block-seconds", type=float, default=200.0, show_default=True),
    click.option("--offset", type=int, default=None,
                 help="Clock offset override, ps; estimated when omitted."),
    click.option("--offset-search", type=int, default=DEFAULT_OFFSET_SEARCH,
                 show_default=True, help="Offset search half-width, ps."),
    click.option("--offset-hist-bin", type=int, default=DEFAULT_OFFSET_HIST_BIN,
                 show_default=True, help="Offset histogram bin, ps."),
    click.option("--policy", type=click.Choice(["random", "discard"]),
                 default="random", show_default=True),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--bootstrap", type=int, default=0, show_default=True,
                 help="Bootstrap resamples for the error bar (0 = off)."),
    click.option("--out", type=str, default="-", show_default=True),
    click.option("--format", "fmt", type=click.Choice(["json", "csv"]),
                 default="json", show_default=True),
]


def _with_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


@main.command()
@_with_options(_shared_analysis_options)
@click.option("--delta-t", type=int, default=540, show_default=True)
def analyze(input_a, input_b, channel_map, tau_mzi, window, block_seconds, offset,
            offset_search, offset_hist_bin, policy, seed, bootstrap, out, fmt,
            delta_t):
    """Certify per-block fidelity bounds for one bin length."""
    _validate_frame_geometry([delta_t], tau_mzi)
    results = _run_analysis(
        input_a, input_b, channel_map, [delta_t], tau_mzi, window, block_seconds,
        offset, offset_search, offset_hist_bin, policy, seed, bootstrap,
    )
    _write_output(
        _results_json(results) if fmt == "json" else _analysis_csv(results), out
    )


@main.command()
@_with_options(_shared_analysis_options)
@click.option("--delta-t-list", type=str, default="2700,1350,540", show_default=True,
              help="Comma-separated bin lengths, ps.")
def sweep(input_a, input_b, channel_map, tau_mzi, window, block_seconds, offset,
          offset_search, offset_hist_bin, policy, seed, bootstrap, out, fmt,
          delta_t_list):
    """Certify a matrix of (block, bin length) fidelity bounds.

    The coincidence pass is shared across bin lengths; only the framing and
    the certification rerun per bin length.
    """
    try:
        delta_ts = [int(x) for x in delta_t_list.split(",") if x.strip()]
    except ValueError:
        raise click.UsageError(f"cannot parse --delta-t-list {delta_t_list!r}")
    if not delta_ts:
        raise click.UsageError("--delta-t-list must name at least one bin length")
    _validate_frame_geometry(delta_ts, tau_mzi)
    results = _run_analysis(
        input_a, input_b, channel_map, delta_ts, tau_mzi, window, block_seconds,
        offset, offset_search, offset_hist_bin, policy, seed, bootstrap,
    )
    _write_output(
        _results_json(results) if fmt == "json" else _sweep_csv(results, delta_ts), out
    )


def _run_analysis(input_a, input_b, channel_map, delta_ts, tau_mzi, window,
                  block_seconds, offset, offset_search, offset_hist_bin, policy,
                  seed, bootstrap):
    if block_seconds <= 0:
        raise click.UsageError("--block-seconds must be positive")
    stream_a = _read_stream(input_a)
    stream_b = _read_stream(input_b)
    channels = _read_channel_map(channel_map)
    return analyze_streams(
        stream_a,
        stream_b,
        channels,
        delta_ts,
        tau_mzi=tau_mzi,
        window=window,
        block_seconds=block_seconds,
        offset=offset,
        policy=_parse_policy(policy),
        seed=seed,
        bootstrap_resamples=bootstrap,
        offset_search=offset_search,
        offset_hist_bin=offset_hist_bin,
    )


@main.command()
@click.option("--input-a", required=True, type=str)
@click.option("--input-b", required=True, type=str)
@click.option("--search-half-width", type=int, default=DEFAULT_OFFSET_SEARCH,
              show_default=True)
@click.option("--hist-bin", type=int, default=DEFAULT_OFFSET_HIST_BIN, show_default=True)
@click.option("--decimate", type=int, default=0, show_default=True,
              help="Use every k-th A event; 0 picks automatically.")
def offset(input_a, input_b, search_half_width, hist_bin, decimate):
    """Estimate the clock offset of stream B relative to stream A."""
    stream_a = _read_stream(input_a)
    stream_b = _read_stream(input_b)
    try:
        if decimate:
            value = timetag.estimate_offset(
                stream_a, stream_b, search_half_width, hist_bin, decimate=decimate
            )
        else:
            value = estimate_stream_offset(
                stream_a, stream_b, search_half_width, hist_bin
            )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    except NoPeak as exc:
        click.echo(f"error: no correlation peak found: {exc}", err=True)
        sys.exit(1)
    click.echo(str(value))


if __name__ == "__main__":
    main()
