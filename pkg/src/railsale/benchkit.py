"""Staged-ramp load generator and report writer.

A :class:`LoadPlan` describes a stepping thread group::

    t = startup_delay          initial_threads start together
    t = startup_delay + k*I    step k (k >= 1) starts step_threads, spread
                               evenly over step_window
    end of last step window    hold for hold_s
    then                       stop rampdown_per_s threads each second,
                               most recently started first

:meth:`LoadPlan.schedule` is a pure function of the plan, so the timeline
can be checked without running anything; :func:`run_plan` replays it on the
wall clock with one thread per virtual user.

Each virtual user registers and logs in first (not sampled), then loops over
the request mix. A ``purchase`` iteration is dedup-token, purchase, then
cancel so seats recycle; the purchase and the cancel are sampled under their
own labels.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import queue
import random
import sys
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

from .errors import ConfigError
from .server import ApiClient, Response

COLUMNS = (
    "Label",
    "Samples",
    "Average",
    "Median",
    "90th",
    "99th",
    "Min",
    "Max",
    "Anomaly Rate",
    "Throughput",
    "Receive KB/s",
    "Send KB/s",
)
LABELS = ("query", "purchase")


@dataclass(frozen=True)
class ThreadEvent:
    at_s: float
    thread: int
    action: str  # "start" or "stop"


@dataclass
class LoadPlan:
    target_threads: int = 100
    startup_delay_s: float = 5.0
    initial_threads: int = 10
    step_threads: int = 10
    step_interval_s: float = 30.0
    step_window_s: float = 5.0
    hold_s: float = 60.0
    rampdown_per_s: int = 5
    mix: dict[str, float] = field(default_factory=lambda: {"query": 1.0})
    base_url: str = "http://127.0.0.1:8080"
    error_ceiling: float = 0.0
    think_time_ms: float = 0.0
    seed: int = 0
    query: dict = field(
        default_factory=lambda: {"date": "2026-11-01", "departure": "A", "arrival": "B"}
    )
    purchase: dict = field(
        default_factory=lambda: {
            "train_id": "G1",
            "service_date": "2026-11-01",
            "departure": "A",
            "arrival": "B",
            "seat_type": "second",
        }
    )

    def __post_init__(self) -> None:
        for name in ("target_threads", "initial_threads", "step_threads", "rampdown_per_s"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("step_interval_s", "step_window_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.startup_delay_s < 0 or self.hold_s < 0 or self.think_time_ms < 0:
            raise ConfigError("startup_delay_s, hold_s and think_time_ms must be >= 0")
        if self.step_window_s > self.step_interval_s:
            raise ConfigError("step_window_s must not exceed step_interval_s")
        if self.initial_threads > self.target_threads:
            raise ConfigError("initial_threads exceeds target_threads")
        unknown = set(self.mix) - set(LABELS)
        if unknown or any(w < 0 for w in self.mix.values()) or not any(self.mix.values()):
            raise ConfigError(f"mix needs non-negative weights over {LABELS}, not all zero")

    @classmethod
    def from_dict(cls, raw: dict) -> "LoadPlan":
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path) -> "LoadPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read plan {path}: {exc}") from None

    def schedule(self) -> list[ThreadEvent]:
        events = [ThreadEvent(self.startup_delay_s, i, "start") for i in range(self.initial_threads)]
        started = self.initial_threads
        step = 0
        while started < self.target_threads:
            step += 1
            n = min(self.step_threads, self.target_threads - started)
            base = self.startup_delay_s + step * self.step_interval_s
            for j in range(n):
                events.append(ThreadEvent(base + j * self.step_window_s / n, started + j, "start"))
            started += n
        ramp_end = self.startup_delay_s + (step * self.step_interval_s + self.step_window_s if step else 0.0)
        hold_end = ramp_end + self.hold_s
        for i in range(math.ceil(self.target_threads / self.rampdown_per_s)):
            for t in range(self.rampdown_per_s):
                thread = self.target_threads - 1 - (i * self.rampdown_per_s + t)
                if thread >= 0:
                    events.append(ThreadEvent(hold_end + i, thread, "stop"))
        return events

    def duration_s(self) -> float:
        return max(e.at_s for e in self.schedule())


def thread_timeline(events: Sequence[ThreadEvent]) -> list[tuple[float, int]]:
    """(time, active thread count) after each distinct event time."""
    out: list[tuple[float, int]] = []
    active = 0
    for at in sorted({e.at_s for e in events}):
        active += sum(1 if e.action == "start" else -1 for e in events if e.at_s == at)
        out.append((at, active))
    return out


@dataclass(frozen=True)
class Sample:
    label: str
    start_s: float
    rt_ms: float
    ok: bool
    bytes_in: int
    bytes_out: int
    code: str | None = None


@dataclass
class RunResult:
    samples: list[Sample]
    invalid: bool = False
    reason: str | None = None


@dataclass(frozen=True)
class ReportRow:
    label: str
    samples: int
    average: float
    median: float
    p90: float
    p99: float
    minimum: float
    maximum: float
    error_rate: float  # percent
    throughput: float  # requests per second
    receive_kbs: float
    send_kbs: float

    def cells(self) -> list[str]:
        return [
            self.label,
            str(self.samples),
            f"{self.average:.2f}",
            f"{self.median:.2f}",
            f"{self.p90:.2f}",
            f"{self.p99:.2f}",
            f"{self.minimum:.2f}",
            f"{self.maximum:.2f}",
            f"{self.error_rate:.2f}%",
            f"{self.throughput:.2f}/sec",
            f"{self.receive_kbs:.2f}",
            f"{self.send_kbs:.2f}",
        ]


@dataclass
class RunReport:
    rows: list[ReportRow]
    invalid: bool = False

    def row(self, label: str) -> ReportRow:
        return next(r for r in self.rows if r.label == label)

    @property
    def total(self) -> ReportRow:
        return self.row("TOTAL")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow(r.cells())
        return buf.getvalue()


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """The ceil(p*N/100)-th smallest value (1-based), clamped to rank 1."""
    if not sorted_values:
        raise ValueError("no values")
    rank = max(1, int(-(-p * len(sorted_values) // 100)))
    return sorted_values[rank - 1]


def _row(label: str, samples: Sequence[Sample]) -> ReportRow:
    rts = sorted(s.rt_ms for s in samples)
    begin = min(s.start_s for s in samples)
    end = max(s.start_s + s.rt_ms / 1000.0 for s in samples)
    wall = max(end - begin, 1e-9)
    failures = sum(1 for s in samples if not s.ok)
    return ReportRow(
        label=label,
        samples=len(rts),
        average=sum(rts) / len(rts),
        median=nearest_rank(rts, 50),
        p90=nearest_rank(rts, 90),
        p99=nearest_rank(rts, 99),
        minimum=rts[0],
        maximum=rts[-1],
        error_rate=100.0 * failures / len(rts),
        throughput=len(rts) / wall,
        receive_kbs=sum(s.bytes_in for s in samples) / 1024.0 / wall,
        send_kbs=sum(s.bytes_out for s in samples) / 1024.0 / wall,
    )


def summarize(samples: Sequence[Sample], invalid: bool = False) -> RunReport:
    if not samples:
        raise ValueError("cannot summarize an empty sample set")
    labels = sorted({s.label for s in samples})
    rows = [_row(label, [s for s in samples if s.label == label]) for label in labels]
    rows.append(_row("TOTAL", samples))
    return RunReport(rows, invalid)


class _VirtualUser:
    def __init__(self, plan: LoadPlan, index: int, sink: "queue.Queue[Sample]", origin: float):
        self.plan = plan
        self.index = index
        self.sink = sink
        self.origin = origin
        self.stop = threading.Event()
        self.rng = random.Random(plan.seed * 1_000_003 + index)
        self.client = ApiClient(plan.base_url)
        self.labels = [k for k, w in plan.mix.items() if w > 0]
        self.weights = [plan.mix[k] for k in self.labels]
        self.failure: str | None = None

    def _timed(self, label: str, call: Callable[[], Response]) -> Response | None:
        t0 = time.perf_counter()
        try:
            resp = call()
        except OSError as exc:
            self.sink.put(Sample(label, t0 - self.origin, (time.perf_counter() - t0) * 1000.0, False, 0, 0, "io"))
            self.client.close()
            self.failure = f"{type(exc).__name__}: {exc}"
            return None
        rt = (time.perf_counter() - t0) * 1000.0
        self.sink.put(Sample(label, t0 - self.origin, rt, resp.ok, resp.bytes_in, resp.bytes_out, resp.error_code))
        return resp

    def _login(self) -> None:
        name = f"bench{self.plan.seed}u{self.index}"
        reg = self.client.register(name, "bench-pass", self._id_number(), "13800000000")
        if not reg.ok and reg.error_code != "username_taken":
            raise RuntimeError(f"register failed: {reg.body}")
        resp = self.client.login(name, "bench-pass")
        if not resp.ok:
            raise RuntimeError(f"login failed: {resp.body}")

    def _id_number(self) -> str:
        return f"9{self.plan.seed % 1000:03d}{self.index:014d}"

    def _purchase(self) -> None:
        token = self.client.dedup_token()
        if not token.ok:
            self.sink.put(Sample("purchase", time.perf_counter() - self.origin, 0.0, False, 0, 0, token.error_code))
            return
        body = dict(self.plan.purchase)
        body["dedup"] = token.body["dedup"]
        body["passengers"] = [{"name": f"Bench {self.index}", "id_number": self._id_number()}]
        resp = self._timed("purchase", lambda: self.client.purchase(body))
        if resp is not None and resp.ok:
            order_no = resp.body["order_no"]
            self._timed("cancel", lambda: self.client.cancel(order_no))

    def run(self) -> None:
        try:
            self._login()
        except (OSError, RuntimeError) as exc:
            self.failure = f"setup: {exc}"
            return
        q = self.plan.query
        try:
            while not self.stop.is_set() and self.failure is None:
                label = self.rng.choices(self.labels, self.weights)[0]
                if label == "query":
                    self._timed("query", lambda: self.client.query(q["date"], q["departure"], q["arrival"]))
                else:
                    self._purchase()
                if self.plan.think_time_ms:
                    self.stop.wait(self.plan.think_time_ms / 1000.0)
        finally:
            self.client.close()


def run_plan(plan: LoadPlan) -> RunResult:
    """Execute the plan's schedule on the wall clock against ``plan.base_url``."""
    sink: "queue.Queue[Sample]" = queue.Queue()
    origin = time.perf_counter()
    users: dict[int, _VirtualUser] = {}
    threads: list[threading.Thread] = []
    reason = None
    for event in sorted(plan.schedule(), key=lambda e: (e.at_s, e.action != "stop")):
        delay = origin + event.at_s - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        if event.action == "start":
            vu = _VirtualUser(plan, event.thread, sink, origin)
            users[event.thread] = vu
            t = threading.Thread(target=vu.run, name=f"vu-{event.thread}", daemon=True)
            t.start()
            threads.append(t)
        else:
            users[event.thread].stop.set()
        broken = [vu.failure for vu in users.values() if vu.failure]
        if broken:
            reason = broken[0]
            break
    for vu in users.values():
        vu.stop.set()
    for t in threads:
        t.join()
    samples = []
    while not sink.empty():
        samples.append(sink.get_nowait())
    if reason is None:
        reason = next((vu.failure for vu in users.values() if vu.failure), None)
    return RunResult(samples, invalid=reason is not None, reason=reason)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bench", description="staged-ramp load test for the ticketing engine")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a load plan and write the CSV report")
    run.add_argument("--plan", required=True, help="plan JSON (LoadPlan fields)")
    run.add_argument("--out", required=True, help="CSV report path")
    run.add_argument("--error-ceiling", type=float, default=None, help="max TOTAL error rate in percent")
    run.add_argument("--dry-run", action="store_true", help="print the thread timeline and exit")
    args = parser.parse_args(argv)

    try:
        plan = LoadPlan.load(args.plan)
    except ConfigError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        for at, active in thread_timeline(plan.schedule()):
            print(f"{at:10.3f}s  {active:4d} threads")
        return 0
    result = run_plan(plan)
    if not result.samples:
        print(f"bench: no samples recorded ({result.reason})", file=sys.stderr)
        return 3
    report = summarize(result.samples, invalid=result.invalid)
    Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_csv())
    if result.invalid:
        print(f"bench: run aborted, report is partial ({result.reason})", file=sys.stderr)
        return 3
    ceiling = plan.error_ceiling if args.error_ceiling is None else args.error_ceiling
    if report.total.error_rate > ceiling:
        print(f"bench: error rate {report.total.error_rate:.2f}% exceeds {ceiling:.2f}%", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
