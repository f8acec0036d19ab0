"""Scenario runner and metrics.

A scenario is a declarative description (JSON-able) of one experiment:
a model pair, a workload, session and policy settings, a channel, a
compute cost model, and ablation flags. ``run_scenario`` builds the
pieces, wires every device session to a cloud runtime over simulated
duplex links, runs the discrete-event loop to completion, and reduces
the sessions into a ``MetricsReport``. Runs are deterministic given
their seeds: identical scenarios produce byte-identical CSV artifacts.

``sweep`` reruns a scenario across the values of one knob and tabulates
the reports. The ``load`` knob is special: it drives an open-loop
synthetic request stream straight into the cloud runtime to map the
scheduler's latency-versus-load profile without device loops in the
way.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import rng as rngs
from .cloud import CloudRuntime, ComputeCostModel
from .core import (
    DraftChunk,
    DraftToken,
    SamplingMode,
    SessionConfig,
    TokenDistribution,
    TokenId,
    VerificationRequest,
)
from .device import (
    DeviceCostModel,
    DeviceSession,
    SOURCE_CLOUD_ACCEPTED,
    SOURCE_CLOUD_CORRECTED,
    VariantFlags,
    device_steps,
)
from .models import (
    EntropyImportance,
    ImportanceProvider,
    LanguageModelBackend,
    LayeredBackend,
    as_layered,
    layered_wrap,
    load_corpus_file,
    load_table_file,
    load_trace_file,
    ngram_lm,
    table_lm,
)
from .policy import OffloadPolicyState, p_imp
from .profiler import ProfileResult
from .sim import Delay, EventLoop, SimGate, SimProcess
from .transport import (
    ChannelModel,
    Hello,
    MSG_HELLO,
    MSG_VERIFY_REQ,
    WireMessage,
    simulated_pair,
)

DEFAULT_PACKING_FACTOR = 1.0


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """Declarative description of one experiment."""

    name: str = "scenario"
    vocab_size: int = 16
    draft_model: dict = field(default_factory=lambda: {"kind": "random-table", "seed": 1, "layers": 4})
    target_model: dict = field(default_factory=lambda: {"kind": "random-table", "seed": 2})
    importance: dict = field(default_factory=lambda: {"kind": "entropy"})
    workload: dict = field(default_factory=lambda: {"synthetic": {"prompt_len": 4, "seed": 7}})
    session: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    channel: dict = field(default_factory=dict)
    cost: dict = field(default_factory=dict)
    device_cost: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    sessions: int = 1
    chunk_size: int = 32
    packing_factor: float = DEFAULT_PACKING_FACTOR
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "Scenario":
        known = {f.name for f in dataclasses.fields(Scenario)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return Scenario(**raw)

    @staticmethod
    def from_file(path: Union[str, Path]) -> "Scenario":
        try:
            return Scenario.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ValueError(f"bad scenario file {path}: {exc}") from exc

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def build_model(spec: dict, vocab_size: int) -> LanguageModelBackend:
    """Materialize a model description into a backend."""
    kind = spec.get("kind", "random-table")
    if kind == "table":
        if "file" in spec:
            base = load_table_file(spec["file"])
        else:
            base = table_lm({tuple(map(int, k.split())) if k else (): v for k, v in spec["rows"].items()})
    elif kind == "ngram":
        corpus = spec.get("corpus")
        if corpus is None:
            corpus = load_corpus_file(spec["corpus_file"])
        base = ngram_lm(corpus, spec.get("n", 2), vocab_size)
    elif kind == "random-table":
        base = random_table_model(vocab_size, spec.get("seed", 0), spec.get("context", 1),
                                  spec.get("concentration", 0.5))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    layers = spec.get("layers", 1)
    if layers > 1 or not isinstance(base, LayeredBackend):
        base = layered_wrap(base, layers, seed=spec.get("noise_seed", 0))
    return base


def random_table_model(
    vocab_size: int, seed: int, context: int = 1, concentration: float = 0.5
) -> LanguageModelBackend:
    """A dense Markov table with Dirichlet rows; handy synthetic model."""
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xAB))))
    rows: dict[tuple, TokenDistribution] = {
        (): TokenDistribution(gen.dirichlet(np.full(vocab_size, concentration)))
    }
    if context >= 1:
        for t in range(vocab_size):
            rows[(t,)] = TokenDistribution(gen.dirichlet(np.full(vocab_size, concentration)))
    return table_lm(rows)


def build_importance(spec: dict, backend: LanguageModelBackend) -> ImportanceProvider:
    kind = spec.get("kind", "entropy")
    if kind == "entropy":
        return EntropyImportance(backend)
    if kind == "trace":
        return load_trace_file(spec["file"])
    if kind == "lognormal":
        return LognormalImportance(seed=spec.get("seed", 0), sigma=spec.get("sigma", 2.0))
    raise ValueError(f"unknown importance kind {kind!r}")


class LognormalImportance(ImportanceProvider):
    """Synthetic long-tail importance keyed by position.

    Deterministic per (seed, position); most scores are tiny and a thin
    tail is large, the shape the offloading budget machinery expects.
    """

    def __init__(self, seed: int = 0, sigma: float = 2.0):
        self.seed = seed
        self.sigma = sigma

    def score(self, prefix, position, dist=None) -> float:
        gen = rngs.substream(self.seed, rngs.WORKLOAD, position)
        return float(np.exp(gen.normal(0.0, self.sigma)))


def build_workload(spec: dict, sessions: int, vocab_size: int) -> list[list[TokenId]]:
    """Per-session prompt lists."""
    if "prompts" in spec:
        prompts = [list(p) for p in spec["prompts"]]
        if len(prompts) < sessions:
            prompts = [prompts[i % len(prompts)] for i in range(sessions)]
        return prompts[:sessions]
    synth = spec.get("synthetic", {})
    prompt_len = synth.get("prompt_len", 4)
    seed = synth.get("seed", 7)
    out = []
    for i in range(sessions):
        gen = rngs.substream(seed, rngs.WORKLOAD, i)
        out.append([int(t) for t in gen.integers(0, vocab_size, size=prompt_len)])
    return out


def build_policy(scenario: Scenario, budget: Optional[float] = None) -> tuple[OffloadPolicyState, float]:
    """Policy state plus the calibrated acceptance rate alpha.

    Accepts either explicit thresholds or a profile reference; a profile
    is required whenever the budget is meant to pick i_th.
    """
    spec = dict(scenario.policy)
    budget = budget if budget is not None else scenario.session.get("budget", 0.2)
    alpha = spec.pop("alpha", 0.5)
    profile_ref = spec.pop("profile", None)
    if profile_ref is not None:
        prof = ProfileResult.load(profile_ref) if isinstance(profile_ref, str) else ProfileResult.from_json(json.dumps(profile_ref))
        alpha = prof.alpha
        state = prof.policy_state(budget, **spec)
        return state, alpha
    if "c_th" not in spec or "i_th" not in spec:
        raise ValueError("policy needs either a profile or explicit c_th and i_th")
    state = OffloadPolicyState(budget=budget, **spec)
    return state, alpha


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate outcome of one scenario run."""

    mean_tbt: float
    offload_fraction: float
    offload_chunk_fraction: float
    acceptance_rate: float
    prediction_hit_rate: float
    fallback_count: int
    estimated_cost: float
    tokens: int
    sessions: int
    wall_time: float
    mean_layers_per_token: float = 0.0
    cloud_status: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("offload_fraction", "offload_chunk_fraction", "acceptance_rate", "prediction_hit_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value!r} outside [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def estimate_cost(packing_factor: float, mean_tbt: float, offload_token_fraction: float) -> float:
    """Cloud serving cost proxy: (1 / packing factor) * TBT * offloaded share."""
    if packing_factor <= 0.0:
        raise ValueError("packing factor must be positive")
    if not 0.0 <= offload_token_fraction <= 1.0:
        raise ValueError("offload token fraction must lie in [0, 1]")
    return mean_tbt * offload_token_fraction / packing_factor


# ---------------------------------------------------------------------------
# Simulation wiring
# ---------------------------------------------------------------------------


@dataclass
class SimOutcome:
    sessions: list[DeviceSession]
    runtime: CloudRuntime
    wall_time: float


def run_simulation(
    draft_model: LayeredBackend,
    target_model: LanguageModelBackend,
    importance: ImportanceProvider,
    prompts: Sequence[Sequence[TokenId]],
    config: SessionConfig,
    policy: OffloadPolicyState,
    alpha: float = 0.5,
    flags: Optional[VariantFlags] = None,
    channel_up: Optional[ChannelModel] = None,
    channel_down: Optional[ChannelModel] = None,
    cost_model: Optional[ComputeCostModel] = None,
    device_cost: Optional[DeviceCostModel] = None,
    chunk_size: int = 32,
    kill_transport_at: Optional[float] = None,
    on_merge: Optional[Callable[[DeviceSession, CloudRuntime], None]] = None,
) -> SimOutcome:
    """Run N device sessions against one cloud runtime in virtual time.

    ``on_merge`` fires after every verdict merge with the session and the
    runtime, which is how tests assert cross-side invariants at the exact
    moment they must hold.
    """
    flags = flags or VariantFlags()
    channel_up = channel_up or ChannelModel()
    channel_down = channel_down or channel_up
    loop = EventLoop()
    runtime = CloudRuntime(
        engine=target_model,
        cost_model=cost_model or ComputeCostModel(),
        clock=loop.now,
        gate=SimGate(loop),
        chunk_size=chunk_size,
    )
    SimProcess(loop, runtime.serve_steps(), name="cloud")

    sessions: list[DeviceSession] = []
    endpoints = []
    procs = []
    for i, prompt in enumerate(prompts):
        dev_ep, cloud_ep = simulated_pair(loop, channel_up, channel_down, name=f"s{i}")
        reply = _cloud_reply(cloud_ep)
        cloud_ep.on_deliver = lambda msg, reply=reply: runtime.ingest(msg, reply)
        session = DeviceSession(
            session_id=i + 1,
            config=dataclasses.replace(config, seed=config.seed + i),
            policy=policy,
            prompt=list(prompt),
            draft_model=draft_model,
            importance=importance,
            cost_model=device_cost or DeviceCostModel(),
            flags=flags,
            alpha=alpha,
            on_merge=(lambda s, rt=runtime: on_merge(s, rt)) if on_merge else None,
        )
        sessions.append(session)
        endpoints.append((dev_ep, cloud_ep))
        procs.append(SimProcess(loop, device_steps(session, dev_ep, loop.now), name=f"device{i}"))

    if kill_transport_at is not None:
        def _kill() -> None:
            for dev_ep, cloud_ep in endpoints:
                dev_ep.close()
                cloud_ep.close()

        loop.call_at(kill_transport_at, _kill)

    loop.run_until_idle()
    runtime.stop()
    for proc in procs:
        if not proc.done:
            raise RuntimeError(f"device process {proc.name} never finished")
    return SimOutcome(sessions=sessions, runtime=runtime, wall_time=loop.now())


def _cloud_reply(cloud_ep):
    from .transport import ChannelClosed

    def reply(msg_type: int, session: int, payload) -> None:
        try:
            cloud_ep.send(msg_type, session, payload)
        except ChannelClosed:
            pass  # device side is gone; it will fall back locally

    return reply


def reduce_report(outcome: SimOutcome, packing_factor: float = DEFAULT_PACKING_FACTOR) -> MetricsReport:
    sessions = outcome.sessions
    total_tokens = sum(len(s.sources) for s in sessions)
    cloud_tokens = sum(
        1 for s in sessions for src in s.sources if src in (SOURCE_CLOUD_ACCEPTED, SOURCE_CLOUD_CORRECTED)
    )
    offload_chunks = sum(s.offload_chunks for s in sessions)
    total_chunks = sum(s.offload_chunks + s.retained_chunks for s in sessions)
    drafted = sum(s.drafted_offloaded for s in sessions)
    accepted = sum(s.accepted_tokens for s in sessions)
    predictions = sum(s.predictions for s in sessions)
    hits = sum(s.hits for s in sessions)
    mean_tbt = float(np.mean([s.summary()["mean_tbt"] for s in sessions])) if sessions else 0.0
    offload_fraction = cloud_tokens / total_tokens if total_tokens else 0.0
    drafted_all = sum(s.drafted_tokens for s in sessions)
    layers_all = sum(s.layers_computed for s in sessions)
    return MetricsReport(
        mean_tbt=mean_tbt,
        offload_fraction=offload_fraction,
        offload_chunk_fraction=offload_chunks / total_chunks if total_chunks else 0.0,
        acceptance_rate=accepted / drafted if drafted else 0.0,
        prediction_hit_rate=hits / predictions if predictions else 0.0,
        fallback_count=sum(1 for s in sessions if s.offline),
        estimated_cost=estimate_cost(packing_factor, mean_tbt, offload_fraction),
        tokens=total_tokens,
        sessions=len(sessions),
        wall_time=outcome.wall_time,
        mean_layers_per_token=layers_all / drafted_all if drafted_all else 0.0,
        cloud_status=outcome.runtime.status(),
    )


def run_scenario(scenario: Scenario, out_dir: Optional[Union[str, Path]] = None) -> MetricsReport:
    """Build a scenario, run it, optionally write artifacts, return the report."""
    draft = as_layered(build_model(scenario.draft_model, scenario.vocab_size))
    target = build_model(scenario.target_model, scenario.vocab_size)
    importance = build_importance(scenario.importance, draft)
    config = SessionConfig(**{"max_len": 64, "seed": scenario.seed, **scenario.session,
                              "sampling": _sampling_from(scenario.session.get("sampling"))})
    policy, alpha = build_policy(scenario)
    prompts = build_workload(scenario.workload, scenario.sessions, scenario.vocab_size)
    outcome = run_simulation(
        draft,
        target,
        importance,
        prompts,
        config,
        policy,
        alpha=alpha,
        flags=VariantFlags(**scenario.flags),
        channel_up=ChannelModel(**scenario.channel),
        cost_model=ComputeCostModel(**scenario.cost),
        device_cost=DeviceCostModel(**scenario.device_cost),
        chunk_size=scenario.chunk_size,
    )
    report = reduce_report(outcome, scenario.packing_factor)
    if out_dir is not None:
        write_artifacts(Path(out_dir), scenario, outcome, report)
    return report


def _sampling_from(spec) -> SamplingMode:
    if spec is None:
        return SamplingMode.top1()
    if isinstance(spec, SamplingMode):
        return spec
    return SamplingMode(spec["kind"], k=spec.get("k", 0), p=spec.get("p", 0.0))


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def write_artifacts(out_dir: Path, scenario: Scenario, outcome: SimOutcome, report: MetricsReport) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "tokens.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["session", "position", "timestamp", "source", "token"])
        for session in outcome.sessions:
            base = len(session.prompt)
            for i, (src, ts, tok) in enumerate(
                zip(session.sources, session.timestamps, session.generated)
            ):
                writer.writerow([session.session_id, base + i, repr(ts), src, tok])
    with open(out_dir / "sessions.jsonl", "w") as fh:
        for session in outcome.sessions:
            fh.write(json.dumps(session.summary(), sort_keys=True) + "\n")
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    (out_dir / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True))
    (out_dir / "cloud_status.json").write_text(json.dumps(outcome.runtime.status(), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_KNOBS = ("budget", "bandwidth", "session_count", "exit_threshold", "load")


def apply_knob(scenario: Scenario, knob: str, value: float) -> Scenario:
    out = Scenario.from_dict(json.loads(json.dumps(scenario.to_dict())))
    if knob == "budget":
        out.session = {**out.session, "budget": value}
    elif knob == "bandwidth":
        out.channel = {**out.channel, "bandwidth_bps": value}
    elif knob == "session_count":
        out.sessions = int(value)
    elif knob == "exit_threshold":
        out.policy = {**out.policy, "margin_threshold": value}
    else:
        raise ValueError(f"unknown sweep knob {knob!r}")
    return out


def sweep(
    scenario: Scenario,
    knob: str,
    values: Sequence[float],
    out_dir: Optional[Union[str, Path]] = None,
) -> list[tuple[float, MetricsReport]]:
    """One report per knob value; writes a single CSV table when asked."""
    if knob not in SWEEP_KNOBS:
        raise ValueError(f"knob must be one of {SWEEP_KNOBS}")
    rows: list[tuple[float, MetricsReport]] = []
    for value in values:
        if knob == "load":
            point = run_load_point(
                budget=scenario.session.get("budget", 0.2),
                intensity=value,
                cost_model=ComputeCostModel(**scenario.cost),
                seed=scenario.seed,
            )
            rows.append((value, point))
        else:
            rows.append((value, run_scenario(apply_knob(scenario, knob, value))))
    if out_dir is not None:
        write_sweep_csv(Path(out_dir), scenario.name, knob, rows)
    return rows


def write_sweep_csv(out_dir: Path, name: str, knob: str, rows) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"sweep_{knob}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        first = rows[0][1]
        fields = sorted(k for k in first.to_dict() if k != "cloud_status") if isinstance(first, MetricsReport) else sorted(first)
        writer.writerow([knob] + fields)
        for value, report in rows:
            record = report.to_dict() if isinstance(report, MetricsReport) else dict(report)
            writer.writerow([repr(float(value))] + [repr(record[f]) if isinstance(record[f], float) else record[f] for f in fields])
    return path


# ---------------------------------------------------------------------------
# Open-loop load harness (cloud scalability)
# ---------------------------------------------------------------------------


def run_load_point(
    budget: float,
    intensity: float,
    cost_model: Optional[ComputeCostModel] = None,
    duration: float = 30.0,
    chunk_rate: float = 1.0,
    gamma: int = 4,
    uncached_per_request: int = 4,
    seed: int = 0,
    importance_sigma: float = 2.0,
) -> dict:
    """Mean verification latency under an open-loop synthetic load.

    ``intensity`` synthetic token streams each produce one chunk per
    1/chunk_rate seconds and push it through the importance gate at the
    given budget; surviving chunks become single-shot verification
    requests injected straight into the runtime. Requests arrive whether
    or not earlier ones finished, so past the scheduler's capacity the
    backlog (and the mean latency) grows without bound.
    """
    cost_model = cost_model or ComputeCostModel()
    loop = EventLoop()
    vocab = 8
    engine = random_table_model(vocab, seed=99)
    runtime = CloudRuntime(engine=engine, cost_model=cost_model, clock=loop.now, gate=SimGate(loop))
    SimProcess(loop, runtime.serve_steps(), name="cloud")

    # importance cutoff for this budget from a synthetic long-tail sample
    sample_gen = rngs.substream(seed, rngs.WORKLOAD, 10_000_019)
    cdf = np.sort(np.exp(sample_gen.normal(0.0, importance_sigma, size=4096)))
    i_th = math.inf if budget == 0.0 else float(np.quantile(cdf, 1.0 - budget))
    policy = OffloadPolicyState(c_th=0.5, i_th=i_th, budget=budget)

    dist = engine.distribution(())
    token = dist.argmax()
    template_tokens = tuple(
        DraftToken(token=token, confidence=dist.top1(), importance=1.0, dist=dist)
        for _ in range(gamma)
    )

    n_streams = max(1, int(round(intensity)))
    period = 1.0 / chunk_rate
    sent = {"count": 0}

    def stream(idx: int):
        gen_imp = rngs.substream(seed, rngs.WORKLOAD, idx)
        gen_gate = rngs.substream(seed, rngs.OFFLOAD, idx)
        offset = idx * period / n_streams  # stagger streams across the period
        yield Delay(offset)
        t = offset
        k = 0
        while t < duration:
            importance = float(np.exp(gen_imp.normal(0.0, importance_sigma)))
            if gen_gate.random() < p_imp(importance, policy):
                sid = idx * 1_000_000 + k + 1
                chunk = DraftChunk.from_tokens(sid, uncached_per_request, template_tokens)
                request = VerificationRequest(
                    session=sid,
                    cached_len=0,
                    uncached_accepted=tuple([token] * uncached_per_request),
                    pending=chunk,
                )
                runtime.ingest(
                    WireMessage(MSG_HELLO, sid, 0, Hello(vocab, gamma, SamplingMode.topp(1.0), seed, False)),
                    _null_reply,
                )
                runtime.ingest(WireMessage(MSG_VERIFY_REQ, sid, 1, request), _null_reply)
                sent["count"] += 1
            yield Delay(period)
            t += period
            k += 1

    for idx in range(n_streams):
        SimProcess(loop, stream(idx), name=f"load{idx}")
    loop.run_until_idle()
    runtime.stop()
    latencies = runtime.verify_latencies
    return {
        "budget": budget,
        "intensity": intensity,
        "offered_requests": sent["count"],
        "offered_rate": sent["count"] / duration,
        "served": runtime.verifies_served,
        "mean_latency": float(np.mean(latencies)) if latencies else 0.0,
        "p99_latency": float(np.quantile(latencies, 0.99)) if latencies else 0.0,
    }


def _null_reply(msg_type: int, session: int, payload) -> None:
    return None
