"""Command line: ``solve`` one case, ``bench`` a directory of cases.

Every numeric option can also be set through an environment variable named
``OPFGLOBAL_<OPTION>`` (for example ``OPFGLOBAL_TIME_LIMIT=60``); explicit
flags win over the environment.

Exit codes: 0 solved (or the requested truncated mode finished), 2 time limit
reached, 1 error. On error no report file is written.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .bnb import BnbOptions, BnbStatus, SolveReport, solve
from .case_io import load_case
from .errors import OpfError, ZeroUpperBound
from .local import LocalOptions
from .qcqp import build_qcqp
from .reform import build_reformulation
from .relaxation import QpOptions
from .sdp import SdpOptions, SdpStatus, duality_gap, solve_sdp

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ENV_PREFIX = "OPFGLOBAL_"
MODES = ("full", "root-only", "sdp-only")
FORMATS = ("matpower", "native")
CASE_SUFFIXES = {".m": "matpower", ".json": "native"}


def gap(ub: float, lb: float) -> float:
    """Relative gap ``100 (ub - lb) / ub`` in percent."""
    if ub == 0:
        raise ZeroUpperBound("gap undefined for a zero upper bound")
    if abs(ub - lb) <= 1e-9 * abs(ub):
        return 0.0
    return 100.0 * (ub - lb) / ub


@dataclass
class RunConfig:
    input_path: Path
    input_format: str | None = None
    mode: str = "full"
    output_path: Path | None = None
    sdp: SdpOptions = field(default_factory=SdpOptions)
    qp: QpOptions = field(default_factory=QpOptions)
    local: LocalOptions = field(default_factory=LocalOptions)
    bnb: BnbOptions = field(default_factory=BnbOptions)

    def validate(self) -> None:
        if not Path(self.input_path).is_file():
            raise FileNotFoundError(f"input file {self.input_path} does not exist")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.input_format not in (None, *FORMATS):
            raise ValueError(f"format must be one of {FORMATS}")
        b = self.bnb
        if not b.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 <= b.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if b.heuristic_period < 1 or b.threads < 1:
            raise ValueError("heuristic period and threads must be at least 1")
        if not b.time_limit > 0:
            raise ValueError("time limit must be positive")

    def to_dict(self) -> dict:
        bnb = asdict(self.bnb)
        bnb.pop("qp", None)
        bnb.pop("local", None)
        return {
            "input_path": str(self.input_path),
            "input_format": self.input_format,
            "mode": self.mode,
            "sdp": asdict(self.sdp),
            "qp": asdict(self.qp),
            "local": asdict(self.local),
            "bnb": bnb,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sdp, qp, local = SdpOptions(**d["sdp"]), QpOptions(**d["qp"]), LocalOptions(**d["local"])
        return cls(input_path=Path(d["input_path"]), input_format=d.get("input_format"),
                   mode=d.get("mode", "full"), sdp=sdp, qp=qp, local=local,
                   bnb=BnbOptions(**d["bnb"], qp=qp, local=local))


@dataclass
class RunResult:
    report: dict
    solve: SolveReport | None
    exit_code: int


def _write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def run_case(config: RunConfig) -> RunResult:
    """Parse, build, solve the SDP, reformulate, then branch and bound (per mode)."""
    config.validate()
    bnb_opts = config.bnb
    bnb_opts.qp, bnb_opts.local = config.qp, config.local
    timings: dict[str, float] = {}

    t = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        case = load_case(config.input_path, config.input_format)
    timings["parse"] = time.perf_counter() - t
    t = time.perf_counter()
    model = build_qcqp(case)
    timings["build"] = time.perf_counter() - t
    t = time.perf_counter()
    sdp = solve_sdp(model, config.sdp)
    timings["sdp"] = time.perf_counter() - t
    off = model.objective_offset

    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "case": case.name,
        "n_bus": case.n_bus,
        "mode": config.mode,
        "config": config.to_dict(),
        "warnings": [str(w.message) for w in caught],
        "sdp": {
            "status": sdp.status.value,
            "primal_value": sdp.primal_value + off,
            "dual_value": sdp.dual_value + off,
            "relative_gap": duality_gap(sdp) if sdp.status == SdpStatus.Optimal else None,
            "iterations": sdp.iterations,
            "primal_infeasibility": sdp.primal_infeasibility,
            "dual_infeasibility": sdp.dual_infeasibility,
        },
        "timings": timings,
    }
    rep = None
    exit_code = 0
    if sdp.status == SdpStatus.Infeasible:
        report["status"] = "Infeasible"
    elif sdp.status != SdpStatus.Optimal:
        raise OpfError(f"SDP solve ended with status {sdp.status.value}")
    elif config.mode == "sdp-only":
        report["status"] = "SdpOnly"
    else:
        t = time.perf_counter()
        r = build_reformulation(model, sdp)
        timings["reformulation"] = time.perf_counter() - t
        report["reformulation"] = json.loads(r.audit_json())
        if config.mode == "root-only":
            bnb_opts = BnbOptions(**{**asdict(bnb_opts), "node_limit": 1,
                                     "qp": config.qp, "local": config.local})
        t = time.perf_counter()
        rep = solve(model, r, bnb_opts)
        timings["bnb"] = time.perf_counter() - t
        report["bnb"] = rep.to_dict()
        report["bnb"]["root_gap_pct"] = _pct(rep.upper_bound, rep.root_bound)
        report["bnb"]["final_gap_pct"] = _pct(rep.upper_bound, rep.lower_bound)
        if config.mode == "root-only" and rep.status == BnbStatus.TimeLimit:
            report["status"] = "RootOnly"
        else:
            report["status"] = rep.status.value
            if rep.status == BnbStatus.TimeLimit:
                exit_code = 2
    timings["total"] = sum(timings.values())
    if config.output_path is not None:
        _write_atomic(config.output_path, json.dumps(report, indent=2) + "\n")
    return RunResult(report, rep, exit_code)


def _pct(ub: float, lb: float):
    # an incumbent feasible to 1e-5 can sit marginally below a relaxation bound
    try:
        v = gap(ub, lb)
    except ZeroUpperBound:
        return None
    return max(0.0, v) if math.isfinite(v) else None


@dataclass
class BenchRow:
    case_name: str
    root_gap: float | None
    final_gap: float | None
    time_s: float | None
    nodes: int | None
    status: str
    error: str = ""

    def csv_row(self) -> dict:
        return {"case": self.case_name, "root_gap_pct": _fmt(self.root_gap),
                "final_gap_pct": _fmt(self.final_gap), "time_s": _fmt(self.time_s),
                "nodes": "" if self.nodes is None else self.nodes, "status": self.status}


def _fmt(v):
    return "" if v is None else f"{v:.6g}"


CSV_COLUMNS = ["case", "root_gap_pct", "final_gap_pct", "time_s", "nodes", "status"]


def corpus_files(corpus_dir: Path) -> list[Path]:
    files = [p for p in Path(corpus_dir).iterdir()
             if p.is_file() and p.suffix.lower() in CASE_SUFFIXES]
    return sorted(files, key=lambda p: (p.stem, p.suffix))


def run_bench(corpus_dir: Path, base: RunConfig | None = None) -> list[BenchRow]:
    """One row per case file, in case-name order; a failing case never stops the batch."""
    if not Path(corpus_dir).is_dir():
        raise FileNotFoundError(f"corpus directory {corpus_dir} does not exist")
    rows = []
    for path in corpus_files(corpus_dir):
        cfg = RunConfig(**{**base.__dict__, "input_path": path, "input_format": None,
                           "output_path": None}) if base else RunConfig(path)
        cfg.bnb = BnbOptions(**{**asdict(cfg.bnb), "qp": cfg.qp, "local": cfg.local})
        t0 = time.perf_counter()
        try:
            res = run_case(cfg)
        except Exception as exc:  # noqa: BLE001 - isolation is the contract here
            log.warning("case %s failed: %s", path.stem, exc)
            rows.append(BenchRow(path.stem, None, None, time.perf_counter() - t0, None,
                                 "error", f"{type(exc).__name__}: {exc}"))
            continue
        rep = res.solve
        b = res.report.get("bnb", {})
        rows.append(BenchRow(
            case_name=path.stem,
            root_gap=b.get("root_gap_pct"),
            final_gap=b.get("final_gap_pct"),
            time_s=res.report["timings"]["total"],
            nodes=None if rep is None else rep.nodes_processed,
            status=res.report["status"],
        ))
    return rows


def write_bench(rows: list[BenchRow], csv_path: Path | None, json_path: Path | None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow(r.csv_row())
    if json_path is not None:
        _write_atomic(json_path, json.dumps({"schema_version": SCHEMA_VERSION,
                                             "rows": [asdict(r) for r in rows]}, indent=2) + "\n")


def _env(name: str, cast, default):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise SystemExit(f"invalid {ENV_PREFIX}{name}={raw!r}: {exc}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=FORMATS, default=_env("FORMAT", str, None))
    p.add_argument("--mode", choices=MODES, default=_env("MODE", str, "full"))
    p.add_argument("--epsilon", type=float, default=_env("EPSILON", float, 1e-5))
    p.add_argument("--delta", type=float, default=_env("DELTA", float, 0.5))
    p.add_argument("--heuristic-period", type=int, default=_env("HEURISTIC_PERIOD", int, 3))
    p.add_argument("--time-limit", type=float, default=_env("TIME_LIMIT", float, 300.0))
    p.add_argument("--threads", type=int, default=_env("THREADS", int, 1))
    p.add_argument("--fix-reference", choices=("off", "on", "auto"),
                   default=_env("FIX_REFERENCE", str, "off"),
                   help="pin the first bus angle to zero (auto: when the model allows it)")
    p.add_argument("--qp-backend", choices=("clarabel", "osqp"),
                   default=_env("QP_BACKEND", str, "clarabel"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opfglobal", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve one case")
    s.add_argument("path", type=Path)
    s.add_argument("--out", type=Path, default=_env("OUT", Path, None))
    _add_common(s)
    b = sub.add_parser("bench", help="solve every case file in a directory")
    b.add_argument("corpus", type=Path)
    b.add_argument("--csv", type=Path, default=_env("CSV", Path, None))
    b.add_argument("--json", type=Path, default=_env("JSON", Path, None))
    _add_common(b)
    return ap


def config_from_args(args, path: Path, out: Path | None) -> RunConfig:
    qp = QpOptions(backend=args.qp_backend)
    local = LocalOptions()
    return RunConfig(
        input_path=path, input_format=args.format, mode=args.mode, output_path=out,
        qp=qp, local=local,
        bnb=BnbOptions(epsilon=args.epsilon, delta=args.delta,
                       heuristic_period=args.heuristic_period, time_limit=args.time_limit,
                       threads=args.threads, qp=qp, local=local,
                       fix_reference={"off": False, "on": True, "auto": None}[args.fix_reference]),
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "solve":
        cfg = config_from_args(args, args.path, args.out)
        try:
            res = run_case(cfg)
        except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
            print(f"error: {args.path.stem}: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
        _print_summary(res.report)
        return res.exit_code
    cfg = config_from_args(args, args.corpus, None)
    try:
        rows = run_bench(args.corpus, cfg)
        write_bench(rows, args.csv, args.json)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    w = csv.DictWriter(sys.stdout, fieldnames=CSV_COLUMNS)
    w.writeheader()
    for r in rows:
        w.writerow(r.csv_row())
    return 0


def _print_summary(report: dict) -> None:
    lines = [f"case {report['case']}  status {report['status']}"]
    s = report["sdp"]
    lines.append(f"  sdp bound {s['primal_value']:.6f}  (dual {s['dual_value']:.6f})")
    b = report.get("bnb")
    if b:
        lines.append(f"  upper {b['upper_bound']}  lower {b['lower_bound']}  "
                     f"root gap {b['root_gap_pct']}%  final gap {b['final_gap_pct']}%  "
                     f"nodes {b['nodes_processed']}")
    lines.append(f"  time {report['timings']['total']:.2f}s")
    print("\n".join(lines))


if __name__ == "__main__":
    sys.exit(main())
