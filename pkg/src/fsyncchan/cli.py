"""Command-line front end.

Subcommands: calibrate, send, recv, bench, analyze (episodes, rate, splits,
classify, keystrokes).  Simulation is the default everywhere; real fsync
probing is opt-in via --real --file PATH on a file the caller created.

Exit codes: 0 success, 1 runtime failure (I/O, probe errors), 2 usage or
configuration error, 3 protocol timeout (no frame within the receive window).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

from .analyzer import (
    SPLIT_THRESHOLD_NS,
    classification_report,
    classify_split,
    count_above,
    estimate_request_rate,
    extract_episodes,
    histogram_features,
    keystroke_timings,
    knn_classify,
    knn_train,
    load_labeled_dataset,
    split_detection_metrics,
    train_test_split,
    write_classification_report,
)
from .core import (
    BitStream,
    ChannelConfig,
    DecisionRule,
    ProbeMode,
    decode_frames,
    encode_frames,
    frames_to_bits,
    prbs_sequence,
    trace_read,
    trace_write,
)
from .metrics import capacity
from .modem import (
    CalibrationError,
    ScheduleBuilder,
    ThresholdState,
    TraceSource,
    calibrate,
    receive_frame,
    send_bits,
)
from .probe import ProbeError, ProbeHandle
from .simchan import (
    IDLE,
    NoiseDegree,
    NoiseProcess,
    SimParams,
    SimSource,
    load_sim_params,
    sim_receive,
    sim_transmit,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_TIMEOUT = 3

BENCH_CSV_HEADER = "t_s_us,noise,n_bits,err_1to0,err_0to1,rate_1to0,rate_0to1,p_err,B_bps,C_bps"


class ProtocolTimeout(Exception):
    """No (or not enough) frames recovered within the receive window."""


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-purpose sub-seed so every stage has its own stream."""
    digest = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _channel_config(args) -> ChannelConfig:
    return ChannelConfig(
        ts_us=args.ts_us,
        probe_mode=ProbeMode(args.mode),
        decision_rule=DecisionRule(args.decision),
        payload_len=args.frame_payload_len,
    )


def _sim_params(args) -> SimParams:
    if getattr(args, "sim_params", None):
        return load_sim_params(args.sim_params)
    return SimParams()


def _noise_process(args, params: SimParams, model) -> NoiseProcess | None:
    degree = params.noise_degree
    if getattr(args, "noise", None):
        degree = NoiseDegree(args.noise)
    return NoiseProcess.from_degree(degree, model)


def _require_seed(args) -> int:
    if args.seed is None:
        raise ValueError("--seed is required in sim mode")
    return args.seed


def _quiet_calibration_trace(model, cfg: ChannelConfig, seed: int):
    """Simulate enough quiet probing for a threshold fit."""
    if cfg.decision_rule is DecisionRule.MEAN:
        duration_ns = 5_000_000
    else:
        duration_ns = max(5_000_000, 70 * cfg.ts_ns)
    return sim_receive(IDLE, model, derive_seed(seed, "calibrate"), duration_ns=duration_ns)


def _threshold_state(args, cfg: ChannelConfig, params: SimParams, seed: int) -> ThresholdState:
    if getattr(args, "theta_ns", None):
        theta = args.theta_ns
        return ThresholdState(
            theta_ns=theta,
            quiet_mean_ns=theta / 1.5,
            quiet_std_ns=0.0,
            decision_rule=cfg.decision_rule,
            provenance="manual",
        )
    return calibrate(_quiet_calibration_trace(params.model(), cfg, seed), cfg)


def _payload_bits(args, seed: int) -> BitStream:
    if getattr(args, "payload_file", None):
        text = Path(args.payload_file).read_text(encoding="ascii")
        bits = BitStream.from_text(text)
        if len(bits) == 0:
            raise ValueError("payload file contains no bits")
        return bits
    return prbs_sequence(args.payload_bits, derive_seed(seed, "payload"))


def cmd_calibrate(args) -> int:
    cfg = _channel_config(args)
    if args.real:
        if not args.file:
            raise ValueError("--real requires --file PATH")
        with ProbeHandle(args.file, cfg.probe_mode) as handle:
            trace = handle.probe_for(args.duration_us)
    else:
        seed = _require_seed(args)
        params = _sim_params(args)
        trace = _quiet_calibration_trace(params.model(), cfg, seed)
    state = calibrate(trace, cfg)
    print(
        f"theta_ns={state.theta_ns} quiet_mean_ns={state.quiet_mean_ns:.1f} "
        f"quiet_std_ns={state.quiet_std_ns:.1f} rule={cfg.decision_rule.value} "
        f"samples={len(trace)}"
    )
    if args.out:
        Path(args.out).write_text(
            f"theta_ns={state.theta_ns}\n"
            f"quiet_mean_ns={state.quiet_mean_ns:.3f}\n"
            f"quiet_std_ns={state.quiet_std_ns:.3f}\n"
            f"rule={cfg.decision_rule.value}\n",
            encoding="ascii",
        )
    return EXIT_OK


def cmd_send(args) -> int:
    cfg = _channel_config(args)
    seed = _require_seed(args) if not args.real else (args.seed or 0)
    payload = _payload_bits(args, seed)
    frames = encode_frames(payload, cfg)
    tx_bits = frames_to_bits(frames)
    if args.real:
        if not args.file:
            raise ValueError("--real requires --file PATH")
        with ProbeHandle(args.file, cfg.probe_mode) as handle:
            report = send_bits(tx_bits, cfg, handle)
        print(
            f"sent {len(frames)} frame(s), {len(payload)} payload bits, "
            f"{len(tx_bits)} symbols, {report.total_fsyncs} fsyncs"
        )
        return EXIT_OK
    if not args.out:
        raise ValueError("sim send requires --out TRACE_CSV")
    params = _sim_params(args)
    model = params.model()
    noise = _noise_process(args, params, model)
    trace = sim_transmit(tx_bits, cfg, model, derive_seed(seed, "channel"), noise=noise)
    trace_write(trace, args.out)
    print(
        f"sent {len(frames)} frame(s), {len(payload)} payload bits, {len(tx_bits)} symbols; "
        f"wrote {len(trace)} samples ({trace.duration_ns / 1e6:.2f} ms virtual) to {args.out}"
    )
    return EXIT_OK


def _recv_frames(source, cfg, state, args, max_symbols) -> list[BitStream]:
    payloads = []
    for _ in range(args.frames):
        p = receive_frame(
            source, cfg, state, max_symbols=max_symbols, max_mismatches=args.max_mismatches
        )
        if p is None:
            break
        payloads.append(p)
    return payloads


def cmd_recv(args) -> int:
    cfg = _channel_config(args)
    seed = _require_seed(args) if not args.real else (args.seed or 0)
    params = _sim_params(args)
    state = _threshold_state(args, cfg, params, seed)
    max_symbols = args.max_symbols or 4 * cfg.frame_len
    if args.real:
        if not args.file:
            raise ValueError("--real requires --file PATH")
        with ProbeHandle(args.file, cfg.probe_mode) as source:
            payloads = _recv_frames(source, cfg, state, args, max_symbols)
    else:
        if not args.trace:
            raise ValueError("sim recv requires --trace TRACE_CSV")
        source = TraceSource(trace_read(args.trace))
        payloads = _recv_frames(source, cfg, state, args, max_symbols)
    if len(payloads) < args.frames:
        raise ProtocolTimeout(
            f"recovered {len(payloads)}/{args.frames} frame(s) within {max_symbols} symbols each"
        )
    joined = BitStream()
    for p in payloads:
        joined = joined + p
    n_bits = args.payload_bits or len(joined)
    if n_bits > len(joined):
        raise ValueError(f"--payload-bits {n_bits} exceeds recovered {len(joined)} bits")
    text = joined[:n_bits].to_text()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="ascii")
    else:
        print(text)
    print(f"recovered {len(payloads)} frame(s), {n_bits} payload bits", file=sys.stderr)
    return EXIT_OK


def _bench_one(ts_us: int, degree: NoiseDegree, args, params: SimParams, seed: int):
    cfg = ChannelConfig(
        ts_us=ts_us,
        probe_mode=ProbeMode(args.mode),
        decision_rule=DecisionRule(args.decision),
        payload_len=args.frame_payload_len,
    )
    model = params.model()
    noise = NoiseProcess.from_degree(degree, model)
    run_tag = f"{ts_us}:{degree.value}"
    payload = prbs_sequence(args.payload_bits, derive_seed(seed, f"payload:{run_tag}"))
    frames = encode_frames(payload, cfg)
    tx_bits = frames_to_bits(frames)

    builder = ScheduleBuilder(cfg.ts_us, model)
    send_bits(tx_bits, cfg, builder)
    state = calibrate(_quiet_calibration_trace(model, cfg, seed), cfg)
    source = SimSource(
        builder.schedule(), model, derive_seed(seed, f"channel:{run_tag}"), noise=noise
    )

    n_bits = err_1to0 = err_0to1 = n_ones = n_zeros = 0
    for frame in frames:
        sent = frame.payload
        ones = sent.count(1)
        n_bits += len(sent)
        n_ones += ones
        n_zeros += len(sent) - ones
        got = receive_frame(source, cfg, state, max_symbols=2 * cfg.frame_len, max_mismatches=1)
        if got is None:
            # lost frame: every bit of it counts as an error
            err_1to0 += ones
            err_0to1 += len(sent) - ones
            continue
        for s, r in zip(sent, got):
            if s == 1 and r == 0:
                err_1to0 += 1
            elif s == 0 and r == 1:
                err_0to1 += 1
    p = (err_1to0 + err_0to1) / n_bits
    cap = capacity(ts_us, p)
    return {
        "t_s_us": ts_us,
        "noise": degree.value,
        "n_bits": n_bits,
        "err_1to0": err_1to0,
        "err_0to1": err_0to1,
        "rate_1to0": err_1to0 / n_ones if n_ones else 0.0,
        "rate_0to1": err_0to1 / n_zeros if n_zeros else 0.0,
        "p_err": p,
        "B_bps": cap.bandwidth_bps,
        "C_bps": cap.capacity_bps,
    }


def cmd_bench(args) -> int:
    seed = _require_seed(args)
    params = _sim_params(args)
    ts_list = [int(v) for v in args.ts_us.split(",") if v]
    degrees = [NoiseDegree(v) for v in args.noise.split(",") if v]
    if not ts_list or not degrees:
        raise ValueError("--ts-us and --noise must list at least one value each")
    rows = [_bench_one(ts, degree, args, params, seed) for ts in ts_list for degree in degrees]
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r['t_s_us']},{r['noise']},{r['n_bits']},{r['err_1to0']},{r['err_0to1']},"
            f"{r['rate_1to0']:.6f},{r['rate_0to1']:.6f},{r['p_err']:.6f},"
            f"{r['B_bps']:.3f},{r['C_bps']:.3f}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _analyze_episode_rows(args):
    trace = trace_read(args.trace)
    return trace, extract_episodes(trace, args.theta_ns, args.max_gap_ns)


def cmd_analyze_episodes(args) -> int:
    _, episodes = _analyze_episode_rows(args)
    with open(args.out, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["start_ns", "end_ns", "est_latency_ns", "n_samples"])
        for ep in episodes:
            writer.writerow([ep.start_ns, ep.end_ns, ep.est_latency_ns, ep.n_samples])
    print(f"{len(episodes)} episode(s) -> {args.out}")
    return EXIT_OK


def cmd_analyze_rate(args) -> int:
    trace = trace_read(args.trace)
    counts = count_above(trace, args.theta_ns, args.bucket_s)
    rates = estimate_request_rate(counts, args.samples_per_request)
    with open(args.out, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bucket", "t_start_s", "count_above", "est_requests"])
        for i, (c, r) in enumerate(zip(counts, rates)):
            writer.writerow([i, f"{i * args.bucket_s:.3f}", c, f"{r:.2f}"])
    print(f"{len(counts)} bucket(s), {sum(counts)} above-threshold samples -> {args.out}")
    return EXIT_OK


def cmd_analyze_splits(args) -> int:
    _, episodes = _analyze_episode_rows(args)
    with open(args.out, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["start_ns", "end_ns", "est_latency_ns", "n_samples", "label"])
        for ep in episodes:
            writer.writerow(
                [
                    ep.start_ns,
                    ep.end_ns,
                    ep.est_latency_ns,
                    ep.n_samples,
                    classify_split(ep, args.split_threshold_ns).value,
                ]
            )
    n_split = sum(
        classify_split(ep, args.split_threshold_ns).value == "split" for ep in episodes
    )
    print(f"{len(episodes)} episode(s), {n_split} classified split -> {args.out}")
    if args.truth:
        truth = []
        with open(args.truth, newline="", encoding="ascii") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["start_ns", "is_split"]:
                raise ValueError("truth CSV must start with header 'start_ns,is_split'")
            for row in reader:
                if row:
                    truth.append((int(row[0]), row[1] in ("1", "true", "True")))
        m = split_detection_metrics(
            episodes, truth, split_threshold_ns=args.split_threshold_ns, tol_ns=args.tol_ns
        )
        print(
            f"tp={m.tp} fp={m.fp} fn={m.fn} tn={m.tn} "
            f"precision={m.precision:.4f} recall={m.recall:.4f} f1={m.f1:.4f}"
        )
    return EXIT_OK


def cmd_analyze_classify(args) -> int:
    if args.seed is None:
        raise ValueError("--seed is required for the train/test split")
    dataset = load_labeled_dataset(args.dir)
    features = []
    for trace, label in dataset:
        episodes = extract_episodes(trace, args.theta_ns, args.max_gap_ns)
        features.append(
            histogram_features([ep.est_latency_ns for ep in episodes], label=label)
        )
    train, test = train_test_split(features, args.test_frac, args.seed)
    model = knn_train(train, k=args.k)
    y_true = [fv.label for fv in test]
    y_pred = [knn_classify(model, fv) for fv in test]
    report = classification_report(y_true, y_pred)
    write_classification_report(report, args.out)
    print(
        f"classified {len(test)} test sample(s) from {len(dataset)} total; "
        f"accuracy={report.accuracy:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_analyze_keystrokes(args) -> int:
    trace = trace_read(args.trace)
    events, deltas = keystroke_timings(
        trace,
        args.theta_ns,
        min_spacing_ns=round(args.min_spacing_ms * 1e6),
        max_gap_ns=args.max_gap_ns,
    )
    with open(args.out, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "event_ns", "delta_to_next_ns"])
        for i, event in enumerate(events):
            writer.writerow([i, event, deltas[i] if i < len(deltas) else ""])
    print(f"{len(events)} keystroke(s) -> {args.out}")
    return EXIT_OK


def _add_channel_flags(p: argparse.ArgumentParser, include_ts: bool = True) -> None:
    if include_ts:
        p.add_argument("--ts-us", type=int, default=50, help="symbol duration in microseconds")
    p.add_argument(
        "--mode",
        choices=[m.value for m in ProbeMode],
        default=ProbeMode.FSYNC_ONLY.value,
        help="probe mutation mode",
    )
    p.add_argument(
        "--decision",
        choices=[r.value for r in DecisionRule],
        default=DecisionRule.MEAN.value,
        help="per-symbol decision statistic",
    )
    p.add_argument(
        "--frame-payload-len",
        type=int,
        default=8000,
        help="payload bits per frame",
    )
    p.add_argument("--sim-params", help="key=value model parameters file")
    p.add_argument("--seed", type=int, help="run seed (required in sim mode)")


def _add_real_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--real", action="store_true", help="probe a real file instead of simulating")
    p.add_argument("--file", help="probe file path (caller-created; required with --real)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsyncchan",
        description="fsync-latency covert channel toolkit (simulation by default)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="derive the decision threshold from quiet traffic")
    _add_channel_flags(p)
    _add_real_flags(p)
    p.add_argument("--duration-us", type=float, default=5000.0, help="real-probe quiet duration")
    p.add_argument("--out", help="write calibration as key=value lines")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("send", help="transmit a payload (sim writes the receiver trace)")
    _add_channel_flags(p)
    _add_real_flags(p)
    p.add_argument("--payload-file", help="text file of 0/1 payload bits")
    p.add_argument("--payload-bits", type=int, default=8000, help="PRBS payload length")
    p.add_argument("--noise", choices=[d.value for d in NoiseDegree], help="background noise degree")
    p.add_argument("--out", help="trace CSV to write (sim mode)")
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("recv", help="receive frames from a trace (sim) or live probe")
    _add_channel_flags(p)
    _add_real_flags(p)
    p.add_argument("--trace", help="trace CSV to decode (sim mode)")
    p.add_argument("--frames", type=int, default=1, help="frames to recover")
    p.add_argument("--payload-bits", type=int, help="trim recovered payload to this many bits")
    p.add_argument("--theta-ns", type=int, help="decision threshold override")
    p.add_argument("--max-mismatches", type=int, default=1, help="header bit-error budget")
    p.add_argument("--max-symbols", type=int, help="header search window per frame")
    p.add_argument("--out", help="write recovered payload bits")
    p.set_defaults(func=cmd_recv)

    p = sub.add_parser("bench", help="loopback BER/capacity sweep on the simulator")
    _add_channel_flags(p, include_ts=False)
    p.add_argument("--ts-us", default="50,200,400", help="comma-separated symbol durations (us)")
    p.add_argument("--noise", default="none", help="comma-separated noise degrees")
    p.add_argument("--payload-bits", type=int, default=8000, help="payload bits per run")
    p.add_argument("--out", help="bench CSV (stdout if omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="victim-activity analyses over traces")
    asub = p.add_subparsers(dest="analysis", required=True)

    pe = asub.add_parser("episodes", help="extract above-threshold episodes")
    pe.add_argument("--trace", required=True)
    pe.add_argument("--theta-ns", type=int, required=True)
    pe.add_argument("--max-gap-ns", type=int)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_analyze_episodes)

    pr = asub.add_parser("rate", help="above-threshold counts and request rate per bucket")
    pr.add_argument("--trace", required=True)
    pr.add_argument("--theta-ns", type=int, required=True)
    pr.add_argument("--bucket-s", type=float, default=1.0)
    pr.add_argument("--samples-per-request", type=float, default=10.0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_analyze_rate)

    ps = asub.add_parser("splits", help="flag expensive commits among episodes")
    ps.add_argument("--trace", required=True)
    ps.add_argument("--theta-ns", type=int, default=70_000)
    ps.add_argument("--split-threshold-ns", type=int, default=SPLIT_THRESHOLD_NS)
    ps.add_argument("--max-gap-ns", type=int)
    ps.add_argument("--truth", help="ground-truth CSV (start_ns,is_split) to score against")
    ps.add_argument("--tol-ns", type=int, default=10_000_000, help="truth matching tolerance")
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_analyze_splits)

    pc = asub.add_parser("classify", help="k-NN workload classification over a labeled dataset")
    pc.add_argument("--dir", required=True, help="dataset dir with labels.csv + trace CSVs")
    pc.add_argument("--theta-ns", type=int, required=True)
    pc.add_argument("--max-gap-ns", type=int)
    pc.add_argument("--k", type=int, default=5)
    pc.add_argument("--test-frac", type=float, default=0.3)
    pc.add_argument("--seed", type=int)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_analyze_classify)

    pk = asub.add_parser("keystrokes", help="recover keystroke timings")
    pk.add_argument("--trace", required=True)
    pk.add_argument("--theta-ns", type=int, required=True)
    pk.add_argument("--min-spacing-ms", type=float, default=50.0)
    pk.add_argument("--max-gap-ns", type=int)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=cmd_analyze_keystrokes)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ProtocolTimeout as exc:
        print(f"timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (ValueError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProbeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
