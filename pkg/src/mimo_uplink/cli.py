"""Command line entry points (``mimo-uplink --help``)."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .errors import ConfigurationError
from .estimation import bank_stem, import_weight_bank
from .grid import SystemConfig, load_config

MSE_ORDER = ("lmmse", "12w", "3w", "ils", "ls")
BER_ORDER = ("perfect", "12w", "3w", "ils", "ls")


def _floats(text: str) -> tuple[float, ...]:
    """``"10,15,20"`` or ``"1:15"`` (inclusive integer range)."""
    if ":" in text:
        lo, hi = text.split(":")
        return tuple(float(v) for v in range(int(lo), int(hi) + 1))
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip().lower() for v in text.split(",") if v.strip())


def _config(path: str | None) -> SystemConfig:
    return load_config(path) if path else SystemConfig()


def _finish(table, output, self_check: bool, order) -> None:
    from .harness import check_ordering
    if output:
        table.to_csv(output)
    else:
        w = click.get_text_stream("stdout")
        w.write(f"{table.x_label},estimator,{table.metric},ci95_half_width,n\n")
        for r in table.rows:
            w.write(f"{r.point:g},{r.estimator},{r.value:.6g},{r.half_width:.3g},{r.n}\n")
    if self_check:
        bad = check_ordering(table, order)
        for line in bad:
            click.echo(f"invariant violated: {line}", err=True)
        if bad:
            sys.exit(1)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="key = value system configuration file.")


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int) -> None:
    """Massive-MIMO uplink receiver: simulations, weight banks and the UDP pipeline."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")


@main.command("sim-mse")
@config_option
@click.option("--sweep", type=click.Choice(["snr", "L", "snr-fixed"]), default="snr", show_default=True)
@click.option("--estimators", default="ls,ils,3w,12w,lmmse", show_default=True)
@click.option("--snr", default=None, help="Simulated SNR list (dB); default 10..30 for the SNR sweep, else 25.")
@click.option("--L", "L_values", default="1:15", show_default=True)
@click.option("--snr-fixed", default="10,15,20,25,30,35,40", show_default=True)
@click.option("--trials", type=int, default=200_000, show_default=True, help="Link draws per point.")
@click.option("--channel", type=click.Choice(["table3", "uniform"]), default=None,
              help="Truth model (default: uniform for the L sweep, table3 otherwise).")
@click.option("--true-L", type=float, default=7.0, show_default=True)
@click.option("--true-paths", type=int, default=7, show_default=True)
@click.option("--timing-error", type=int, default=0, show_default=True, help="Samples at N_FFT rate.")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
@click.option("--self-check", is_flag=True, help="Exit nonzero if the estimator ordering is violated.")
def sim_mse(config_path, sweep, estimators, snr, L_values, snr_fixed, trials, channel, true_l, true_paths,
            timing_error, seed, workers, output, self_check):
    """Monte Carlo channel-estimation MSE (dB)."""
    from .harness import ExperimentSpec, run_mse_experiment
    kind = {"snr": "mse_vs_snr", "L": "mse_vs_L", "snr-fixed": "mse_vs_snrfixed"}[sweep]
    snr_list = _floats(snr or ("10,15,20,25,30" if sweep == "snr" else "25"))
    spec = ExperimentSpec(kind, _names(estimators), snr_list, _floats(L_values), _floats(snr_fixed), trials, seed,
                          timing_error, channel or ("uniform" if sweep == "L" else "table3"), true_l, true_paths,
                          workers=workers, cfg=_config(config_path))
    _finish(run_mse_experiment(spec), output, self_check, MSE_ORDER)


@main.command("sim-ber")
@config_option
@click.option("--sweep", type=click.Choice(["snr", "L"]), default="snr", show_default=True)
@click.option("--estimators", default="ls,ils,3w,12w", show_default=True)
@click.option("--snr", default="15,20,25,30", show_default=True)
@click.option("--L", "L_values", default="1:15", show_default=True)
@click.option("--slots", type=int, default=174, show_default=True, help="Slots per point (57600 bits each).")
@click.option("--detector", type=click.Choice(["zf", "mmse"]), default="mmse", show_default=True)
@click.option("--channel", type=click.Choice(["table3", "uniform"]), default="table3", show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
@click.option("--self-check", is_flag=True)
def sim_ber(config_path, sweep, estimators, snr, L_values, slots, detector, channel, seed, output, self_check):
    """Uncoded BER through the full slot chain, with Wilson intervals."""
    from .harness import ExperimentSpec, run_ber_experiment
    kind = "ber_vs_gain" if sweep == "snr" else "ber_vs_L"
    spec = ExperimentSpec(kind, _names(estimators), _floats(snr), _floats(L_values), trials=slots, seed=seed,
                          channel=channel, detector=detector, cfg=_config(config_path))
    _finish(run_ber_experiment(spec), output, self_check, BER_ORDER)


@main.command("gen-weights")
@config_option
@click.option("--weights-dir", required=True, type=click.Path(file_okay=False))
@click.option("--L", "L_values", default="1:15", show_default=True)
@click.option("--kinds", default="3W,12W", show_default=True)
@click.option("--snr-fixed", type=float, default=None, help="Design SNR (dB); default from config.")
def gen_weights(config_path, weights_dir, L_values, kinds, snr_fixed):
    """Write weight-bank text files for every L."""
    from .harness import generate_weights
    kinds = tuple(k.upper() for k in kinds.split(","))
    paths = generate_weights(_config(config_path), weights_dir, [int(v) for v in _floats(L_values)], kinds,
                             snr_fixed)
    click.echo(f"wrote {len(paths)} files to {weights_dir}")


@main.command("refine-l")
@config_option
@click.option("--weights-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--kind", type=click.Choice(["3W", "12W"]), default="12W", show_default=True)
@click.option("--L", "L_values", default="1:15", show_default=True)
@click.option("--slots", type=int, default=60, show_default=True)
@click.option("--snr", type=float, default=20.0, show_default=True)
@click.option("--channel", type=click.Choice(["table3", "uniform"]), default="uniform", show_default=True)
@click.option("--true-L", type=float, default=7.0, show_default=True)
@click.option("--true-paths", type=int, default=7, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
def refine_l(config_path, weights_dir, kind, L_values, slots, snr, channel, true_l, true_paths, seed, output):
    """Choose the design L by BER, walking from the largest L down."""
    from .harness import refine_L, scenario_slots
    cfg = _config(config_path)
    stream = list(scenario_slots(cfg, slots, snr, seed, channel, true_l, true_paths))
    try:
        chosen, table = refine_L(stream, weights_dir, cfg, kind, [int(v) for v in _floats(L_values)])
    except ConfigurationError as exc:
        raise click.ClickException(str(exc))
    _finish(table, output, False, ())
    click.echo(f"chosen L = {chosen:g}", err=True)


@main.command("bench-timing")
@config_option
@click.option("--estimators", default="ls,3w,12w", show_default=True)
@click.option("--slots", type=int, default=100, show_default=True)
@click.option("--detector", type=click.Choice(["zf", "mmse"]), default="mmse", show_default=True)
@click.option("--pipeline-frames", type=int, default=0, show_default=True,
              help="Also stream this many frames through the threaded receiver for utilization.")
@click.option("--workers", type=int, default=18, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
def bench_timing(config_path, estimators, slots, detector, pipeline_frames, workers, output):
    """Per-estimator stage times and theoretical duty cycle (CSV)."""
    from .harness import measure_timing, write_timing_csv
    rows = measure_timing(_config(config_path), _names(estimators), slots, detector,
                          pipeline_frames=pipeline_frames, workers=workers)
    write_timing_csv(rows, output or click.get_text_stream("stdout"))


@main.command("plot")
@click.argument("csv_files", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for the SVGs (default: next to each CSV).")
def plot(csv_files, out_dir):
    """Render result CSVs as SVG (one per file)."""
    from .harness import ResultTable, emit_plots
    tables, paths = [], []
    for f in csv_files:
        tables.append(ResultTable.from_csv(f))
        target = Path(out_dir) / (Path(f).stem + ".svg") if out_dir else Path(f).with_suffix(".svg")
        target.parent.mkdir(parents=True, exist_ok=True)
        paths.append(target)
    for p in emit_plots(tables, paths):
        click.echo(str(p))


@main.command("golden-vectors")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", "seeds", type=str, multiple=True, default=("0x1234",), show_default=True,
              help="Scrambler seed (repeat; accepts 0x prefix).")
@click.option("--bits", type=int, default=64, show_default=True)
def golden_vectors(out_dir, seeds, bits):
    """Write constellation tables and scrambler keystreams as CSV."""
    from .modem import write_golden_vectors
    for p in write_golden_vectors(out_dir, tuple(int(s, 0) for s in seeds), bits):
        click.echo(str(p))


@main.command("receive")
@config_option
@click.option("--listen", multiple=True, default=("127.0.0.1:9000", "127.0.0.1:9001"), show_default=True,
              help="host:port per ingest thread (repeat).")
@click.option("--estimator", type=click.Choice(["ls", "ils", "3w", "12w", "lmmse"]), default="12w",
              show_default=True)
@click.option("--detector", type=click.Choice(["zf", "mmse"]), default="mmse", show_default=True)
@click.option("--L", "L_design", type=float, default=None, help="Design delay spread of the weight bank.")
@click.option("--snr-fixed", type=float, default=None, help="Design SNR (dB) of the weight bank.")
@click.option("--sigma2", type=float, default=None, help="Noise variance used by the MMSE detector.")
@click.option("--workers", type=int, default=18, show_default=True)
@click.option("--pin-cores/--no-pin-cores", default=True, show_default=True)
@click.option("--weights-dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--duration", type=float, default=None, help="Seconds to run (default: until interrupted).")
@click.option("-o", "--output", default=None, help="Result file or udp://host:port (default: stdout).")
def receive(config_path, listen, estimator, detector, L_design, snr_fixed, sigma2, workers, pin_cores,
            weights_dir, duration, output):
    """Run the threaded UDP receiver and stream per-UE results."""
    import time
    from .pipeline.chain import ReceiverChain
    from .pipeline.receiver import Receiver, parse_endpoint
    cfg = _config(config_path)
    changes = {k: v for k, v in (("L_assumed", L_design), ("snr_fixed_db", snr_fixed), ("sigma2", sigma2))
               if v is not None}
    cfg = cfg.with_(**changes) if changes else cfg
    bank = None
    if weights_dir and estimator in ("3w", "12w"):
        try:
            bank = import_weight_bank(bank_stem(weights_dir, estimator.upper(), cfg.L_assumed))
        except (OSError, ValueError) as exc:
            raise click.ClickException(f"cannot load weight bank: {exc}")
    chain = ReceiverChain(cfg, "ils-linear" if estimator == "ils" else estimator, detector, bank=bank)
    echo = None if output else (lambda r: [click.echo(json.dumps(rec)) for rec in r.records()])
    rx = Receiver(chain, [parse_endpoint(e) for e in listen], workers=workers, pin_cores=pin_cores,
                  output=output, on_result=echo).start()
    click.echo(f"listening on {', '.join(f'{h}:{p}' for h, p in rx.addresses)}", err=True)
    try:
        t_end = None if duration is None else time.monotonic() + duration
        while t_end is None or time.monotonic() < t_end:
            time.sleep(0.1)
    except KeyboardInterrupt:
        pass
    stats = rx.stop()
    click.echo(json.dumps(stats.as_dict()), err=True)


@main.command("transmit")
@config_option
@click.option("--dest", multiple=True, default=("127.0.0.1:9000", "127.0.0.1:9001"), show_default=True)
@click.option("--frames", type=int, default=100, show_default=True)
@click.option("--channel", "channel_mode", type=click.Choice(["identity", "multipath"]), default="identity",
              show_default=True)
@click.option("--snr", type=float, default=None, help="Simulated SNR (dB); omit for a noiseless link.")
@click.option("--timing-error", type=int, default=0, show_default=True)
@click.option("--pace-ms", type=float, default=None, help="Frame period (default: frame_ms).")
@click.option("--seed", type=int, default=1, show_default=True)
def transmit(config_path, dest, frames, channel_mode, snr, timing_error, pace_ms, seed):
    """Emulate the radio front end: stream post-channel slots over UDP."""
    from .pipeline.receiver import parse_endpoint
    from .pipeline.tx import tx_emulator
    report = tx_emulator(_config(config_path), [parse_endpoint(d) for d in dest], frames, channel_mode,
                         snr_db=snr, timing_error=timing_error, pace_ms=pace_ms, seed=seed)
    click.echo(json.dumps({"frames": report.frames, "datagrams": report.datagrams,
                           "elapsed_s": round(report.elapsed_s, 4)}), err=True)


if __name__ == "__main__":
    main()
