"""Suite orchestration, run records, reports and snapshot persistence."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import acceptance
from .config import RunConfig, validate_config
from .rng import RNG_NAME, RNG_VERSION

SUITES = {
    "unit": [1, 2, 3],
    "acceptance": list(range(1, 11)),
    "full": list(range(1, 11)),
}


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def to_jsonable(obj):
    """Recursively convert numpy scalars and arrays for json.dumps."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return to_jsonable(asdict(obj))
    return obj


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    version: str
    rng: dict
    experiments: list = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"

    @property
    def passed(self) -> dict:
        return {e["name"]: e["passed"] for e in self.experiments}

    @property
    def hard_failures(self) -> list:
        return [e["name"] for e in self.experiments if not e["passed"] and not e["soft"]]

    def record_hash(self) -> str:
        """Hash of everything except timings; identical for identical (config, seed)."""
        body = {"config_hash": self.config_hash, "seed": self.seed, "version": self.version, "rng": self.rng,
                "experiments": [{k: v for k, v in e.items() if k != "seconds"} for e in self.experiments]}
        canon = json.dumps(to_jsonable(body), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def as_dict(self) -> dict:
        d = to_jsonable(asdict(self))
        d["record_hash"] = self.record_hash()
        return d


def run_suite(cfg, suite: str | None = None, echo=None) -> RunRecord:
    """Run a named suite, or the criteria listed in ``cfg.experiment.checks`` when ``suite`` is None.

    Aborted experiments are recorded as failures and the suite continues.
    """
    cfg = validate_config(cfg) if not isinstance(cfg, RunConfig) or not cfg.derived else cfg
    if suite is None:
        numbers = [int(c) for c in cfg.experiment.checks]
    elif suite in SUITES:
        numbers = SUITES[suite]
    else:
        raise ValueError(f"unknown suite {suite!r}; expected one of {sorted(SUITES)}")
    seed = cfg.experiment.seed
    record = RunRecord(cfg.config_hash(), seed, artifact_version(), {"name": RNG_NAME, "version": RNG_VERSION},
                       status=cfg.status)
    start = time.perf_counter()
    for num in numbers:
        res = acceptance.run_criterion(acceptance.CRITERIA[num - 1], seed)
        record.experiments.append(to_jsonable({
            "number": res.number, "name": res.name, "passed": res.passed, "soft": res.soft,
            "metrics": res.metrics, "error": res.error, "seconds": res.seconds}))
        if echo is not None:
            echo(res.line())
    record.wall_clock = time.perf_counter() - start
    return record


def _csv_text(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["number", "name", "passed", "soft", "seconds", "summary"])
    for e in record.experiments:
        w.writerow([e["number"], e["name"], e["passed"], e["soft"], f"{e['seconds']:.2f}",
                    e["metrics"].get("summary", "")])
    return buf.getvalue()


def _md_text(record: RunRecord) -> str:
    lines = [f"# Run {record.record_hash()}", "",
             f"config `{record.config_hash}`, seed {record.seed}, version {record.version}, "
             f"rng {record.rng['name']} ({record.rng['version']}), wall clock {record.wall_clock:.1f} s", "",
             "| # | criterion | result | summary |", "|---|---|---|---|"]
    for e in record.experiments:
        tag = "pass" if e["passed"] else ("soft fail" if e["soft"] else "FAIL")
        lines.append(f"| {e['number']} | {e['name']} | {tag} | {e['metrics'].get('summary', '')} |")
    return "\n".join(lines) + "\n"


def emit_report(record: RunRecord, fmt: str, outdir) -> Path:
    """Write record.{json,csv,md} into ``outdir`` and return the path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        text = json.dumps(record.as_dict(), indent=2, sort_keys=True)
    elif fmt == "csv":
        text = _csv_text(record)
    elif fmt == "md":
        text = _md_text(record)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = outdir / f"record.{fmt}"
    path.write_text(text)
    return path


# ---------------------------------------------------------------- snapshots
def save_snapshot(path, array: np.ndarray, meta: dict | None = None) -> tuple[Path, Path]:
    """Raw little-endian array plus a JSON header (shape, dtype tag, endianness)."""
    path = Path(path)
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<")
    raw = path.with_suffix(".bin")
    head = path.with_suffix(".json")
    raw.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    header = {"shape": list(arr.shape), "dtype": dtype.str, "endianness": "little", "meta": to_jsonable(meta or {})}
    head.write_text(json.dumps(header, indent=2, sort_keys=True))
    return raw, head


def load_snapshot(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    data = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=np.dtype(header["dtype"]))
    return data.reshape(header["shape"]), header
