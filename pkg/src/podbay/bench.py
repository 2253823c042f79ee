"""Concurrent load benchmarking with per-phase latency timestamps.

Each request opens a fresh connection and records four durations, all
measured from the moment the request is scheduled:

* ``connect``        -- TCP connection established
* ``pre_transfer``   -- request fully written
* ``start_transfer`` -- first response byte received
* ``total``          -- response fully received

Requests are sent with the gateway's early-acknowledgment header, so the
first response byte is the interim ``102`` line emitted at admission.
``total - start_transfer`` then measures queue wait plus handler time,
the quantity that shrinks as pod or worker capacity grows.
"""

from __future__ import annotations

import asyncio
import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from urllib.parse import urlencode, urlsplit

from .gateway import EARLY_ACK_HEADER
from .orchestrator import QuotaExceeded

SKIPPED = "SKIPPED"


class BenchError(Exception):
    pass


class EmptyInput(BenchError):
    pass


@dataclass(frozen=True)
class RequestTiming:
    """Timing row for one request; durations in seconds from scheduling."""

    index: int
    connect: float
    pre_transfer: float
    start_transfer: float
    total: float
    status: int
    body_len: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and 200 <= self.status < 300


@dataclass(frozen=True)
class BenchReport:
    """Column means over the successful rows of one load run."""

    rows: int
    successes: int
    errors: int
    non_2xx: int
    connect: float
    pre_transfer: float
    start_transfer: float
    total: float
    mean_diff: float      # mean over rows of (total - start_transfer)


def _build_request(url: str, method: str, data: dict | None,
                   early_ack: bool) -> tuple[str, int, bytes]:
    parts = urlsplit(url)
    host = parts.hostname or "127.0.0.1"
    port = parts.port or 80
    path = parts.path or "/"
    body = urlencode(data or {}).encode()
    headers = [
        f"{method} {path} HTTP/1.1",
        f"Host: {host}:{port}",
        "Content-Type: application/x-www-form-urlencoded",
        f"Content-Length: {len(body)}",
        "Connection: close",
    ]
    if early_ack:
        headers.append(f"{EARLY_ACK_HEADER}: 1")
    request = "\r\n".join(headers).encode() + b"\r\n\r\n" + body
    return host, port, request


async def _read_response(reader: asyncio.StreamReader) -> tuple[int, bytes, float]:
    """Read one final response, skipping interim 1xx responses.

    Returns (status, body, first_byte_monotonic). The timestamp is taken
    when the first bytes of the first (possibly interim) status line land.
    """
    first_byte_at: float | None = None
    while True:
        line = await reader.readline()
        if first_byte_at is None:
            first_byte_at = time.monotonic()
        if not line:
            raise ConnectionError("connection closed before status line")
        parts = line.decode("latin-1").split(None, 2)
        if len(parts) < 2 or not parts[0].startswith("HTTP/"):
            raise ConnectionError(f"malformed status line {line!r}")
        status = int(parts[1])
        headers: dict[str, str] = {}
        while True:
            hline = await reader.readline()
            if hline in (b"\r\n", b"\n", b""):
                break
            name, _, value = hline.decode("latin-1").partition(":")
            headers[name.strip().lower()] = value.strip()
        if 100 <= status < 200:
            continue        # interim response: the real one follows
        length = headers.get("content-length")
        if length is not None:
            body = await reader.readexactly(int(length))
        else:
            body = await reader.read()
        return status, body, first_byte_at


async def _one_request(index: int, host: str, port: int, request: bytes,
                       timeout: float) -> RequestTiming:
    t0 = time.monotonic()
    timings = {"connect": 0.0, "pre_transfer": 0.0, "start_transfer": 0.0}
    status, body, error = 0, b"", None
    writer = None

    async def exchange():
        nonlocal writer, status, body
        reader, writer = await asyncio.open_connection(host, port)
        timings["connect"] = time.monotonic() - t0
        writer.write(request)
        await writer.drain()
        timings["pre_transfer"] = time.monotonic() - t0
        status, body, first_byte_at = await _read_response(reader)
        timings["start_transfer"] = first_byte_at - t0

    try:
        await asyncio.wait_for(exchange(), timeout)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a row
        error = f"{type(exc).__name__}: {exc}"
    finally:
        total = time.monotonic() - t0
        if writer is not None:
            writer.close()
    return RequestTiming(index=index, connect=timings["connect"],
                         pre_transfer=timings["pre_transfer"],
                         start_transfer=timings["start_transfer"], total=total,
                         status=status, body_len=len(body), error=error)


async def run_load_async(url: str, n: int, concurrency: int,
                         method: str = "POST", data: dict | None = None,
                         early_ack: bool = True,
                         timeout: float = 120.0) -> list[RequestTiming]:
    host, port, request = _build_request(url, method, data, early_ack)
    semaphore = asyncio.Semaphore(concurrency)

    async def guarded(i: int) -> RequestTiming:
        async with semaphore:
            return await _one_request(i, host, port, request, timeout)

    return list(await asyncio.gather(*(guarded(i) for i in range(n))))


def run_load(url: str, n: int, concurrency: int, method: str = "POST",
             data: dict | None = None, early_ack: bool = True,
             timeout: float = 120.0) -> list[RequestTiming]:
    """Fire ``n`` requests with at most ``concurrency`` in flight."""
    return asyncio.run(run_load_async(url, n, concurrency, method=method,
                                      data=data, early_ack=early_ack,
                                      timeout=timeout))


def aggregate(rows: list[RequestTiming]) -> BenchReport:
    """Column means over successful rows; per-row diffs for ``mean_diff``."""
    if not rows:
        raise EmptyInput("no timing rows to aggregate")
    good = [r for r in rows if r.ok]
    if not good:
        raise EmptyInput("no successful rows to aggregate")
    return BenchReport(
        rows=len(rows),
        successes=len(good),
        errors=sum(1 for r in rows if r.error is not None),
        non_2xx=sum(1 for r in rows
                    if r.error is None and not 200 <= r.status < 300),
        connect=statistics.fmean(r.connect for r in good),
        pre_transfer=statistics.fmean(r.pre_transfer for r in good),
        start_transfer=statistics.fmean(r.start_transfer for r in good),
        total=statistics.fmean(r.total for r in good),
        mean_diff=statistics.fmean(r.total - r.start_transfer for r in good),
    )


@dataclass
class MatrixResult:
    """Reports per (pods, workers) cell; quota-rejected cells are skipped."""

    cells: dict[tuple[int, int], BenchReport | str] = field(default_factory=dict)

    def pods_values(self) -> list[int]:
        return sorted({p for p, _ in self.cells})

    def workers_values(self) -> list[int]:
        return sorted({w for _, w in self.cells})


def run_matrix(scale, url: str, pods_values: list[int],
               workers_values: list[int], n: int, concurrency: int,
               data: dict | None = None, timeout: float = 120.0,
               settle: float = 0.0) -> MatrixResult:
    """Run one load cell per (pods, workers) combination, sequentially.

    ``scale(pods, workers)`` reshapes the deployment before each cell and
    may raise ``QuotaExceeded``, which marks the cell skipped rather than
    aborting the sweep.
    """
    result = MatrixResult()
    for pods in pods_values:
        for workers in workers_values:
            try:
                scale(pods, workers)
            except QuotaExceeded:
                result.cells[(pods, workers)] = SKIPPED
                continue
            if settle:
                time.sleep(settle)
            rows = run_load(url, n, concurrency, data=data, timeout=timeout)
            result.cells[(pods, workers)] = aggregate(rows)
    return result


_LATENCY_COLUMNS = ("connect", "pre_transfer", "start_transfer", "total",
                    "total_minus_start_transfer")


def _report_values(report: BenchReport) -> list[float]:
    return [report.connect, report.pre_transfer, report.start_transfer,
            report.total, report.mean_diff]


def render_latency_table(reports: dict[int, BenchReport],
                         fmt: str = "table", key_label: str = "pods") -> str:
    """Per-pod-count latency means, one row per pod count."""
    header = (key_label,) + _LATENCY_COLUMNS
    rows = [[pods] + _report_values(report)
            for pods, report in sorted(reports.items())]
    if fmt == "csv":
        return _render_csv(header, rows)
    return _render_table(header, [[r[0]] + [f"{v:.5f}" for v in r[1:]]
                                  for r in rows])


def render_matrix_table(matrix: MatrixResult, fmt: str = "table") -> str:
    """``mean_diff`` grid: one row per pod count, one column per worker count."""
    workers = matrix.workers_values()
    header = ("pods",) + tuple(f"workers={w}" for w in workers)
    rows = []
    for pods in matrix.pods_values():
        row: list = [pods]
        for w in workers:
            cell = matrix.cells.get((pods, w))
            if cell is None or cell == SKIPPED:
                row.append(SKIPPED if cell == SKIPPED else "")
            else:
                row.append(cell.mean_diff)
        rows.append(row)
    if fmt == "csv":
        return _render_csv(header, rows)
    return _render_table(header, [[c if isinstance(c, (str, int)) else f"{c:.5f}"
                                   for c in row] for row in rows])


def _render_csv(header: tuple[str, ...], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(c) if isinstance(c, float) else c for c in row])
    return buf.getvalue()


def _render_table(header: tuple[str, ...], rows: list[list]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
