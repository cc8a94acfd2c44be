"""Loss sweeps, protocol comparison and CSV/JSON report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import ExperimentConfig, PointSpec, derive_seeds
from .session import KeyRateReport, optimize_parameters, run_session

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("protocol", "loss_db", "mu1", "mu2", "pZ_alice", "pZ_bob", "qber", "phi_Z", "skr_bps",
                  "secret_fraction")
COMPARISON_COLUMNS = ("loss_db", "skr_2d", "skr_4d", "enhancement", "secret_fraction_2d", "secret_fraction_4d",
                      "secret_fraction_ratio")
LOSS_MATCH_DB = 1e-9


@dataclass(frozen=True)
class PointFailure:
    protocol: str
    loss_db: float
    error: str


@dataclass
class ReportTable:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def add(self, report: KeyRateReport):
        if self.get(report.protocol, report.channel_loss_db) is not None:
            raise ValueError(f"duplicate row for {report.protocol} at {report.channel_loss_db} dB")
        self.rows.append(report)

    def get(self, protocol: str, loss_db: float) -> KeyRateReport | None:
        for r in self.rows:
            if r.protocol == protocol and abs(r.channel_loss_db - loss_db) <= LOSS_MATCH_DB:
                return r
        return None

    def for_protocol(self, protocol: str) -> list[KeyRateReport]:
        return sorted((r for r in self.rows if r.protocol == protocol), key=lambda r: r.channel_loss_db)

    def records(self) -> list[dict]:
        return [r.row() for r in self.rows]

    def last_positive_loss(self, protocol: str) -> float | None:
        """Highest loss in the table that still yields key (None if none does)."""
        pos = [r.channel_loss_db for r in self.for_protocol(protocol) if r.skr_bits_per_second > 0]
        return max(pos) if pos else None

    @property
    def complete(self) -> bool:
        return not self.failures


def evaluate_point(point: PointSpec, defaults: dict, monte_carlo: bool, optimize: bool, seed) -> KeyRateReport:
    cfg = point.session_config(defaults, monte_carlo)
    if optimize:
        best = optimize_parameters(cfg)
        cfg = cfg.replace(decoy=replace(cfg.decoy, mu1=float(best.mu1), mu2=float(best.mu2)),
                          p_Z_bob=float(best.p_Z_bob))
    return run_session(cfg, seed=seed)


def _evaluate(args):
    point, defaults, mc, opt, seed = args
    try:
        return evaluate_point(point, defaults, mc, opt, seed), None
    except Exception as exc:  # recorded per point, the sweep goes on
        return None, f"{type(exc).__name__}: {exc}"


def run_sweep(config: ExperimentConfig, *, optimize: bool | None = None, monte_carlo: bool | None = None,
              workers: int | None = None) -> ReportTable:
    """Evaluate every configured point (explicit points, then the sweep grid).

    Points run in parallel processes when ``workers > 1``; the table is always
    assembled in input order, so the result does not depend on scheduling.
    """
    optimize = config.optimize if optimize is None else optimize
    mc = config.monte_carlo if monte_carlo is None else monte_carlo
    workers = config.workers if workers is None else workers
    points = config.all_points()
    seeds = derive_seeds(config.seed, len(points))
    jobs = [(p, config.defaults, mc, optimize, s) for p, s in zip(points, seeds)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_evaluate, jobs))
    else:
        results = [_evaluate(j) for j in jobs]

    table = ReportTable()
    for point, (report, err) in zip(points, results):
        if err is None:
            try:
                table.add(report)
            except ValueError as exc:
                err = str(exc)
        if err is not None:
            logger.warning("point %s @ %.3f dB failed: %s", point.protocol, point.loss_db, err)
            table.failures.append(PointFailure(point.protocol, point.loss_db, err))
    return table


# -- comparison ------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolComparison:
    loss_db: float
    skr_2d: float
    skr_4d: float
    enhancement: float
    secret_fraction_2d: float
    secret_fraction_4d: float
    secret_fraction_ratio: float

    def row(self) -> dict:
        return {c: getattr(self, c) for c in COMPARISON_COLUMNS}


@dataclass
class ComparisonTable:
    rows: list
    # (protocol, loss) rows without a counterpart in the other protocol
    missing: list

    def at(self, loss_db: float) -> ProtocolComparison | None:
        return next((c for c in self.rows if abs(c.loss_db - loss_db) <= LOSS_MATCH_DB), None)

    def records(self) -> list[dict]:
        return [c.row() for c in self.rows]


def _ratio(a: float, b: float) -> float:
    if b > 0:
        return a / b
    return math.inf if a > 0 else math.nan


def compare_protocols(table: ReportTable) -> ComparisonTable:
    """SKR(4D) / SKR(2D) and the secret-fraction ratio at every loss both protocols share."""
    rows, missing = [], []
    for r2 in table.for_protocol("2D"):
        r4 = table.get("4D", r2.channel_loss_db)
        if r4 is None:
            missing.append(("2D", r2.channel_loss_db))
            continue
        rows.append(ProtocolComparison(
            r2.channel_loss_db, r2.skr_bits_per_second, r4.skr_bits_per_second,
            _ratio(r4.skr_bits_per_second, r2.skr_bits_per_second),
            r2.secret_fraction, r4.secret_fraction, _ratio(r4.secret_fraction, r2.secret_fraction)))
    for r4 in table.for_protocol("4D"):
        if table.get("2D", r4.channel_loss_db) is None:
            missing.append(("4D", r4.channel_loss_db))
    if missing:
        logger.warning("rows without a counterpart: %s", missing)
    return ComparisonTable(rows, missing)


# -- files -----------------------------------------------------------------------

def format_records(records: list[dict], columns, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({c: rec[c] for c in columns})
        return buf.getvalue()
    if fmt == "json":
        return json.dumps([{c: rec[c] for c in columns} for rec in records], indent=2) + "\n"
    raise ValueError(f"unknown format {fmt!r}; expected csv or json")


def write_text(text: str, path) -> None:
    """Write ``text`` to ``path``; OSError propagates to the caller."""
    Path(path).write_text(text)


def emit_report(table: ReportTable, fmt: str = "csv", path=None) -> str:
    """Render the table (one row per protocol and loss) and write it to ``path`` if given."""
    text = format_records(table.records(), REPORT_COLUMNS, fmt)
    if path is not None:
        write_text(text, path)
    return text


def parse_report(text: str, fmt: str = "csv") -> list[dict]:
    """Inverse of :func:`emit_report` for its text output."""
    if fmt == "json":
        return json.loads(text)
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    return [{k: (v if k == "protocol" else float(v)) for k, v in row.items()} for row in reader]
