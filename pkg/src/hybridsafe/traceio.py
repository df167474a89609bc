"""Trace CSV and event-log JSON.

Floats are written with ``repr`` (shortest round-trip form), so reading a
file back reproduces the in-memory trace bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Union

from .core import EventRecord, Sample, Status, Trace

PathLike = Union[str, Path]


def trace_to_csv(trace: Trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", *trace.names, "status", "mode"])
    for s in trace.samples:
        w.writerow([repr(s.time), *(repr(v) for v in s.state), s.status.value, s.mode])
    return buf.getvalue()


def trace_from_csv(text: str) -> Trace:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty trace file")
    header = rows[0]
    if header[0] != "time" or header[-2:] != ["status", "mode"]:
        raise ValueError(f"unexpected trace header {header}")
    trace = Trace(tuple(header[1:-2]))
    for row in rows[1:]:
        trace.samples.append(Sample(float(row[0]), tuple(float(v) for v in row[1:-2]),
                                    Status(row[-2]), row[-1]))
    return trace


def events_to_json(trace: Trace) -> str:
    out = [
        {
            "t": e.time,
            "kind": e.kind,
            "detector": e.source,
            "writes": [{"var": n, "pre": a, "post": b} for n, a, b in e.writes],
        }
        for e in trace.events
    ]
    return json.dumps(out, indent=1) + "\n"


def events_from_json(text: str) -> list:
    return [
        EventRecord(float(e["t"]), e["kind"], e["detector"],
                    tuple((w["var"], w["pre"], w["post"]) for w in e["writes"]))
        for e in json.loads(text)
    ]


def write_trace_csv(trace: Trace, path: PathLike) -> None:
    Path(path).write_text(trace_to_csv(trace), encoding="utf-8")


def read_trace_csv(path: PathLike) -> Trace:
    return trace_from_csv(Path(path).read_text(encoding="utf-8"))


def write_events_json(trace: Trace, path: PathLike) -> None:
    Path(path).write_text(events_to_json(trace), encoding="utf-8")


def read_events_json(path: PathLike) -> list:
    return events_from_json(Path(path).read_text(encoding="utf-8"))
