"""``memlab`` command-line entry point.

Exit codes: 0 success, 1 configuration or validation error (no report is
written), 2 a correctness check failed (the report is still written).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from memlab import bench, config
from memlab.errors import MemlabError, ValidationError
from memlab.seqplan import framework_parallel

COMMANDS = ("attn-bench", "gradcheck", "precision-demo", "plan-max-seq", "plan-breakdown", "sweep")
FORMATS = ("csv", "json")


@dataclass(frozen=True)
class RunSpec:
    command: str
    config_path: str | None = None
    output_path: str | None = None
    format: str = "csv"
    seed: int = 0
    parallel: bool = False

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}; expected one of {list(COMMANDS)}")
        if self.format not in FORMATS:
            raise ValidationError(f"format must be csv or json, got {self.format!r}")


def _map(fn, jobs, parallel: bool):
    """Run ``fn`` over jobs; results come back in job order either way."""
    if parallel and len(jobs) > 1:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _attn_bench(d, spec):
    cfg = config.attn_bench_config(d)

    def one(job):
        i, case = job
        return [bench.attn_bench_row(case, cfg.numeric_format, spec.seed, i, cfg.tolerance, cfg.workers, cfg.ledger_dir)]

    return bench.ATTN_BENCH_COLUMNS, _map(one, list(enumerate(cfg.cases)), spec.parallel)


def _gradcheck(d, spec):
    cfg = config.gradcheck_config(d)

    def one(job):
        i, case = job
        return bench.gradcheck_rows(case, spec.seed, i, cfg.path, cfg.step, cfg.tolerance)

    return bench.GRADCHECK_COLUMNS, _map(one, list(enumerate(cfg.cases)), spec.parallel)


def _precision(d, spec):
    cfg = config.precision_config(d)

    def one(B):
        return bench.precision_rows(B, cfg.magnitude, cfg.numeric_format, cfg.tolerance, cfg.tiles)

    return bench.PRECISION_COLUMNS, _map(one, cfg.batches, spec.parallel)


def _plan_parallel(cfg):
    if cfg.parallel is not None:
        return cfg.parallel
    return framework_parallel(cfg.framework, cfg.hardware.num_gpus, cfg.batch)


def _plan(d, spec):
    cfg = config.plan_config(d)
    row = bench.plan_row(cfg.model, _plan_parallel(cfg), cfg.hardware, cfg.label)
    return bench.PLAN_COLUMNS, [[row]]


def _breakdown(d, spec):
    cfg = config.plan_config(d, breakdown=True)
    pc = _plan_parallel(cfg)
    rows = [[bench.breakdown_row(cfg.model, pc, cfg.hardware, cfg.label, s)] for s in cfg.seq_lens]
    return bench.BREAKDOWN_COLUMNS, rows


def _sweep(d, spec):
    cfg = config.sweep_config(d)
    jobs = [(g, f) for g in cfg.num_gpus for f in cfg.frameworks]

    def one(job):
        g, f = job
        return [bench.framework_plan_row(cfg.model, f, config.sweep_hardware(cfg, g), cfg.batch)]

    return bench.PLAN_COLUMNS, _map(one, jobs, spec.parallel)


HANDLERS = {
    "attn-bench": _attn_bench,
    "gradcheck": _gradcheck,
    "precision-demo": _precision,
    "plan-max-seq": _plan,
    "plan-breakdown": _breakdown,
    "sweep": _sweep,
}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.5e}"
    return str(v)


def render(columns, rows, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r.values[c]) for c in columns])
        return buf.getvalue()
    doc = {
        "columns": list(columns),
        "rows": [{c: r.values[c] for c in columns} for r in rows],
        "failed_rows": [i for i, r in enumerate(rows) if not r.ok],
    }
    return json.dumps(doc, indent=2) + "\n"


def run(spec: RunSpec, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        d = config.load_yaml(spec.config_path)
        columns, groups = HANDLERS[spec.command](d, spec)
    except ValidationError as exc:
        print(f"memlab {spec.command}: config error: {exc}", file=stderr)
        return 1
    except MemlabError as exc:
        print(f"memlab {spec.command}: aborted: {exc}", file=stderr)
        return 2
    rows = [r for g in groups for r in g]
    text = render(columns, rows, spec.format)
    if spec.output_path is None:
        stdout.write(text)
    else:
        with open(spec.output_path, "w", newline="") as fh:
            fh.write(text)
    failed = [i for i, r in enumerate(rows) if not r.ok]
    for i in failed:
        print(f"memlab {spec.command}: check failed on row {i}: {rows[i].values}", file=stderr)
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memlab", description="Tiled attention and long-sequence memory lab.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", metavar="PATH", help="YAML or JSON config; defaults apply when omitted")
    ap.add_argument("--out", metavar="PATH", help="report path (stdout when omitted)")
    ap.add_argument("--format", choices=FORMATS, default="csv")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--parallel", action="store_true", help="run independent rows concurrently")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(RunSpec(args.command, args.config, args.out, args.format, args.seed, args.parallel))


if __name__ == "__main__":
    sys.exit(main())
