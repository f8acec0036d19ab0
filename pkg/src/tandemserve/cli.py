"""Command-line entry points.

Subcommands:

    profile   profile a model pair offline and write the result JSON
    run       run one scenario on the simulated carrier, write artifacts
    sweep     rerun a scenario across one knob, write a CSV table
    serve     host the cloud runtime on a TCP socket
    device    run device sessions against a remote cloud over TCP
    report    render figures from run or sweep artifacts
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .bench import (
    Scenario,
    build_importance,
    build_model,
    build_policy,
    build_workload,
    run_scenario,
    sweep,
    _sampling_from,
)
from .cloud import CloudRuntime, CloudServer, ComputeCostModel
from .core import SessionConfig
from .device import DeviceCostModel, DeviceSession, VariantFlags, run_session_blocking
from .models import as_layered
from .profiler import profile
from .transport import SocketEndpoint


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tandemserve", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_profile = sub.add_parser("profile", help="profile a model pair offline")
    p_profile.add_argument("--scenario", required=True, type=Path)
    p_profile.add_argument("--out", required=True, type=Path)
    p_profile.add_argument("--seed", type=int, default=None)

    p_run = sub.add_parser("run", help="run a scenario in simulation")
    p_run.add_argument("--scenario", required=True, type=Path)
    p_run.add_argument("--out-dir", required=True, type=Path)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--figures", action="store_true", help="render figures next to the CSVs")

    p_sweep = sub.add_parser("sweep", help="sweep one knob across values")
    p_sweep.add_argument("--scenario", required=True, type=Path)
    p_sweep.add_argument("--knob", required=True,
                         choices=["budget", "bandwidth", "session_count", "exit_threshold", "load"])
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--out-dir", required=True, type=Path)
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--figures", action="store_true")

    p_serve = sub.add_parser("serve", help="host the cloud runtime over TCP")
    p_serve.add_argument("--scenario", required=True, type=Path,
                         help="scenario supplying the target model and cost settings")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=7433)
    p_serve.add_argument("--status-file", type=Path, default=None,
                         help="write operational counters here on shutdown")

    p_device = sub.add_parser("device", help="run device sessions against a remote cloud")
    p_device.add_argument("--scenario", required=True, type=Path)
    p_device.add_argument("--host", default="127.0.0.1")
    p_device.add_argument("--port", type=int, default=7433)
    p_device.add_argument("--out-dir", required=True, type=Path)
    p_device.add_argument("--seed", type=int, default=None)

    p_report = sub.add_parser("report", help="render figures from artifacts")
    p_report.add_argument("--run-dir", type=Path, default=None)
    p_report.add_argument("--sweep-csv", type=Path, default=None)
    p_report.add_argument("--out-dir", type=Path, default=None)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "profile":
        return _cmd_profile(args)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "device":
        return _cmd_device(args)
    if args.command == "report":
        return _cmd_report(args)
    raise AssertionError(f"unhandled command {args.command}")


def _load_scenario(path: Path, seed) -> Scenario:
    scenario = Scenario.from_file(path)
    if seed is not None:
        scenario.seed = seed
        scenario.session = {**scenario.session, "seed": seed}
    return scenario


def _cmd_profile(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    draft = as_layered(build_model(scenario.draft_model, scenario.vocab_size))
    target = build_model(scenario.target_model, scenario.vocab_size)
    importance = build_importance(scenario.importance, draft)
    config = SessionConfig(**{"max_len": 64, "seed": scenario.seed, **scenario.session,
                              "sampling": _sampling_from(scenario.session.get("sampling"))})
    prompts = build_workload(scenario.workload, max(scenario.sessions, 1), scenario.vocab_size)
    result = profile(draft, target, prompts, config, importance, provenance=scenario.name)
    result.save(args.out)
    print(f"profiled {scenario.name}: c_th={result.c_th:.4f} alpha={result.alpha:.4f} "
          f"({len(result.importance_cdf)} importance samples) -> {args.out}")
    return 0


def _cmd_run(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    report = run_scenario(scenario, out_dir=args.out_dir)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "cloud_status"}, indent=2))
    if args.figures:
        from .report import render_run_figures

        for path in render_run_figures(args.out_dir):
            print(f"figure: {path}")
    return 0


def _cmd_sweep(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    rows = sweep(scenario, args.knob, values, out_dir=args.out_dir)
    for value, report in rows:
        if hasattr(report, "mean_tbt"):
            print(f"{args.knob}={value}: tbt={report.mean_tbt:.4f} "
                  f"offload={report.offload_fraction:.3f} cost={report.estimated_cost:.5f}")
        else:
            print(f"{args.knob}={value}: latency={report['mean_latency']:.4f}")
    if args.figures:
        from .report import render_sweep_figures

        for path in render_sweep_figures(Path(args.out_dir) / f"sweep_{args.knob}.csv"):
            print(f"figure: {path}")
    return 0


def _cmd_serve(args) -> int:
    scenario = Scenario.from_file(args.scenario)
    target = build_model(scenario.target_model, scenario.vocab_size)
    runtime = CloudRuntime(
        engine=target,
        cost_model=ComputeCostModel(**scenario.cost),
        chunk_size=scenario.chunk_size,
    )
    server = CloudServer(runtime, host=args.host, port=args.port)
    server.start()
    print(f"cloud runtime listening on {server.host}:{server.port}")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        status = json.dumps(runtime.status(), indent=2, sort_keys=True)
        if args.status_file:
            args.status_file.write_text(status)
        print(status)
    return 0


def _cmd_device(args) -> int:
    scenario = _load_scenario(args.scenario, args.seed)
    draft = as_layered(build_model(scenario.draft_model, scenario.vocab_size))
    importance = build_importance(scenario.importance, draft)
    config = SessionConfig(**{"max_len": 64, "seed": scenario.seed, **scenario.session,
                              "sampling": _sampling_from(scenario.session.get("sampling"))})
    policy, alpha = build_policy(scenario)
    prompts = build_workload(scenario.workload, scenario.sessions, scenario.vocab_size)
    sessions = []
    for i, prompt in enumerate(prompts):
        endpoint = SocketEndpoint(args.host, args.port)
        session = DeviceSession(
            session_id=i + 1,
            config=dataclasses.replace(config, seed=config.seed + i),
            policy=policy,
            prompt=list(prompt),
            draft_model=draft,
            importance=importance,
            cost_model=DeviceCostModel(**scenario.device_cost),
            flags=VariantFlags(**scenario.flags),
            alpha=alpha,
        )
        run_session_blocking(session, endpoint)
        endpoint.close()
        sessions.append(session)
        print(f"session {session.session_id}: {len(session.output())} tokens, "
              f"offloaded {session.offload_chunks} chunks, fallback={session.offline}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sessions.jsonl", "w") as fh:
        for session in sessions:
            fh.write(json.dumps(session.summary(), sort_keys=True) + "\n")
    return 0


def _cmd_report(args) -> int:
    if args.run_dir is None and args.sweep_csv is None:
        raise ValueError("report needs --run-dir or --sweep-csv")
    written = []
    if args.run_dir is not None:
        from .report import render_run_figures

        written += render_run_figures(args.run_dir, args.out_dir)
    if args.sweep_csv is not None:
        from .report import render_sweep_figures

        written += render_sweep_figures(args.sweep_csv, args.out_dir)
    for path in written:
        print(f"figure: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
