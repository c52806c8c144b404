"""Configuration, block ingestion and result serialization for the CLI.

A run is described by a :class:`RunConfig`.  Real data arrives as a JSON
manifest listing one CSV file per block::

    {
      "response": "y",
      "features": ["x1", "x2", "x3"],
      "blocks": [{"id": 1, "path": "site1.csv"}, {"id": 2, "path": "site2.csv"}]
    }

Relative paths are resolved against the manifest's directory.  Results are
written as one JSON document (schema ``hetdetect-report/1``) or as flat
CSV rows ``entity,dim,metric,value`` that load back to the same document.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .errors import (
    BlockFileNotFound,
    ConfigError,
    EmptyBlock,
    HetDetectError,
    KTooSmall,
    NonNumericCell,
    NumericalError,
    SchemaMismatch,
)
from .glm_core import BlockData, LocalFit, fit_block
from .inference import FAMILIES, WEIGHT_PRESETS, evaluate_dimensions, split_block
from .power_analysis import (
    LocalAlternative,
    classify_regime,
    detection_boundary,
    ect_threshold,
    gamma_error_bound,
    gamma_recommendation,
    snr_ect,
    snr_wald,
)
from .simlab import CALIBRATIONS, DEFAULT_LEVELS, SimConfig, SimResult, coverage_table, run_experiment

SCHEMA = "hetdetect-report/1"
TOOL_VERSION = f"hetdetect v{__version__}"
COMMANDS = ("test", "simulate", "coverage", "power-calc", "gamma-opt")
FORMATS = ("json", "csv")
CSV_HEADER = ("entity", "dim", "metric", "value")
THREADS_ENV = "HETDETECT_THREADS"

_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$|^[+-]?(nan|inf|infinity)$", re.I)


class OutputError(ConfigError):
    """The result could not be written."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    command: str
    blocks: str | None = None
    model: str = "linear"
    alpha: float = 0.05
    gamma: float = 2.0 / 3.0
    weight: str = "theory"
    seed: int = 0
    out: str | None = None
    format: str = "json"
    threads: int = 1
    shuffle_seed: int | None = None
    # simulation
    K: int = 25
    n: int = 500
    p: int = 3
    beta: float | None = None
    replicates: int = 500
    calibration: str = "nominal"
    levels: tuple[float, ...] | None = None
    hetero_dim: int = 3
    base_value: float = 1.0
    shift_scale: float = 4.5
    eta: float = 4.1
    zeta: float = 2.0
    coverage_dim: int = 1
    # power analysis
    c: float = 1.0
    sigma: float = 1.0
    sigma_minus: float | None = None
    sigma_plus: float | None = None
    mu: float | None = None
    eps: float = 0.0

    def __post_init__(self):
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        problems = []
        if self.command not in COMMANDS:
            problems.append(f"unknown command {self.command!r}")
        if self.model not in ("linear", "logistic"):
            problems.append(f"unknown model {self.model!r}")
        if self.weight not in WEIGHT_PRESETS:
            problems.append(f"unknown weight preset {self.weight!r}")
        if self.format not in FORMATS:
            problems.append(f"unknown format {self.format!r}")
        if self.calibration not in CALIBRATIONS:
            problems.append(f"unknown calibration {self.calibration!r}")
        if not 0.0 < self.alpha < 1.0:
            problems.append("alpha must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            problems.append("gamma must lie in (0, 1)")
        if self.threads < 1:
            problems.append("threads must be at least 1")
        for name in ("seed", "shuffle_seed"):
            v = getattr(self, name)
            if v is not None and not 0 <= v < 2**64:
                problems.append(f"{name} must be an unsigned 64-bit integer")
        if self.levels is not None and not all(0.0 < v < 1.0 for v in self.levels):
            problems.append("levels must lie in (0, 1)")
        if self.command == "test" and not self.blocks:
            problems.append("test needs a block manifest (--blocks)")
        if self.command == "coverage" and self.beta is not None:
            problems.append("coverage runs under the null; drop --beta")
        if self.command == "gamma-opt" and self.mu is None:
            problems.append("gamma-opt needs --mu")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_mapping(cls, command: str, values: dict) -> "RunConfig":
        """Build a config from flag/file values; a previous run's echo is accepted too."""
        values = dict(values)
        values.pop("command", None)
        values.pop("split", None)  # implied by shuffle_seed
        if "B" in values:
            values.setdefault("replicates", values.pop("B"))
        known = {f.name for f in fields(cls)} - {"command"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        try:
            return cls(command=command, **values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def sim_config(self) -> SimConfig:
        return SimConfig(
            K=self.K, n=self.n, p=self.p, model=self.model, beta=self.beta,
            alpha=self.alpha, B=self.replicates, seed=self.seed, gamma=self.gamma,
            weight=self.weight, calibration=self.calibration,
            hetero_dim=self.hetero_dim, base_value=self.base_value,
            shift_scale=self.shift_scale, eta=self.eta, zeta=self.zeta,
            coverage_dim=self.coverage_dim,
        )

    def echo(self) -> dict:
        """Every setting that affects the result, defaults included.

        Output location, format and thread count are left out: they do not
        change the numbers.
        """
        d = {"command": self.command}
        if self.command == "test":
            d.update(
                blocks=self.blocks, model=self.model, alpha=self.alpha, gamma=self.gamma,
                weight=self.weight,
                split="prefix" if self.shuffle_seed is None else "seeded-shuffle",
                shuffle_seed=self.shuffle_seed,
            )
        elif self.command in ("simulate", "coverage"):
            sim = self.sim_config()
            if self.command == "coverage":
                sim = SimConfig(**{**asdict(sim), "calibration": "nominal"})
            d.update(sim.to_dict())
            levels = self.levels
            if self.command == "coverage" and levels is None:
                levels = DEFAULT_LEVELS
            d["levels"] = list(levels) if levels is not None else None
        elif self.command == "power-calc":
            smin, splus = self._sigma_bounds()
            d.update(K=self.K, n=self.n, beta=self.beta, c=self.c, sigma=self.sigma,
                     sigma_minus=smin, sigma_plus=splus, gamma=self.gamma)
        else:
            d.update(n=self.n, mu=self.mu, K=self.K, eps=self.eps)
        return d

    def _sigma_bounds(self) -> tuple[float, float]:
        smin = self.sigma if self.sigma_minus is None else self.sigma_minus
        splus = self.sigma if self.sigma_plus is None else self.sigma_plus
        return float(smin), float(splus)


def resolve_threads(flag: int | None, env: dict | None = None) -> int:
    """``--threads`` wins; otherwise ``HETDETECT_THREADS``; otherwise 1."""
    if flag is not None:
        return int(flag)
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return value


def load_config_file(path: str | os.PathLike) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


# ---------------------------------------------------------------------------
# Block manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockEntry:
    block_id: int
    path: Path


@dataclass(frozen=True)
class BlockManifest:
    response: str
    features: tuple[str, ...]
    blocks: tuple[BlockEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.features:
            raise ConfigError("manifest lists no feature columns")
        if len(set(self.features)) != len(self.features):
            raise ConfigError("manifest repeats a feature column")
        if self.response in self.features:
            raise ConfigError("response column is also listed as a feature")
        ids = [b.block_id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ConfigError("block ids must be unique")

    @property
    def K(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | os.PathLike = ".") -> "BlockManifest":
        if not isinstance(data, dict):
            raise ConfigError("manifest must be a JSON object")
        missing = [k for k in ("response", "features", "blocks") if k not in data]
        if missing:
            raise ConfigError(f"manifest is missing {missing}")
        base = Path(base_dir)
        entries = []
        for i, item in enumerate(data["blocks"]):
            try:
                bid, raw = item["id"], item["path"]
            except (TypeError, KeyError):
                raise ConfigError(f"manifest block #{i + 1} needs 'id' and 'path'") from None
            if isinstance(bid, bool) or not isinstance(bid, int) or bid < 0:
                raise ConfigError(f"block id {bid!r} must be a non-negative integer")
            path = Path(raw)
            entries.append(BlockEntry(bid, path if path.is_absolute() else base / path))
        return cls(str(data["response"]), tuple(str(f) for f in data["features"]), tuple(entries))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BlockManifest":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise BlockFileNotFound(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, path.parent)


def _parse_cell(text: str, row: int, column: str, path: Path) -> float:
    cell = text.strip()
    if not _NUMBER.match(cell):
        raise NonNumericCell(f"{path}: row {row}, column {column!r}: {text!r} is not a number")
    return float(cell)


def read_block_csv(entry: BlockEntry, response: str, features: Sequence[str]) -> BlockData:
    try:
        with open(entry.path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise EmptyBlock(f"{entry.path}: file is empty")
            header = [h.strip() for h in header]
            for col in (*features, response):
                if col not in header:
                    raise SchemaMismatch(f"{entry.path}: missing column {col!r}")
            idx = [header.index(c) for c in features]
            ridx = header.index(response)
            X, y = [], []
            for row_no, row in enumerate(reader, start=1):
                if not row:
                    continue
                if len(row) != len(header):
                    raise SchemaMismatch(
                        f"{entry.path}: row {row_no} has {len(row)} fields, header has {len(header)}"
                    )
                X.append([_parse_cell(row[i], row_no, header[i], entry.path) for i in idx])
                y.append(_parse_cell(row[ridx], row_no, response, entry.path))
    except FileNotFoundError:
        raise BlockFileNotFound(f"block {entry.block_id}: file not found: {entry.path}") from None
    if not y:
        raise EmptyBlock(f"block {entry.block_id}: {entry.path} has no data rows")
    return BlockData(entry.block_id, np.array(X, dtype=float), np.array(y, dtype=float))


def load_blocks(manifest: BlockManifest) -> list[BlockData]:
    """Read every block listed in ``manifest``, in manifest order.

    Rows keep their file order, which is what prefix splitting relies on.
    """
    if manifest.K < 2:
        raise KTooSmall(f"need at least 2 blocks, manifest lists {manifest.K}")
    return [read_block_csv(e, manifest.response, manifest.features) for e in manifest.blocks]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _document(config: RunConfig, result: dict) -> dict:
    return {
        "schema": SCHEMA,
        "tool_version": TOOL_VERSION,
        "config": config.echo(),
        "result": result,
    }


def _fit(data: BlockData, model: str, split: str) -> LocalFit:
    try:
        return fit_block(data, model, split=split)
    except HetDetectError as exc:
        raise exc.with_context(f"block {data.block_id} ({split} sample)") from exc


def _split_seed(shuffle_seed: int, block_id: int) -> np.random.SeedSequence:
    # keyed by block id so reordering the manifest leaves each shuffle unchanged
    return np.random.SeedSequence(shuffle_seed, spawn_key=(block_id,))


def fit_all(blocks: Sequence[BlockData], model: str, gamma: float, shuffle_seed: int | None = None):
    """Full-sample, first-split and second-split fits of every block."""
    full, first, second = [], [], []
    mode = "prefix" if shuffle_seed is None else "seeded-shuffle"
    for b in blocks:
        full.append(_fit(b, model, "full"))
        seed = None if shuffle_seed is None else _split_seed(shuffle_seed, b.block_id)
        try:
            a, c = split_block(b, gamma, mode=mode, seed=seed)
        except HetDetectError as exc:
            raise exc.with_context(f"block {b.block_id}") from exc
        first.append(_fit(a, model, "first"))
        second.append(_fit(c, model, "second"))
    return full, first, second


def run_test_command(config: RunConfig, manifest: BlockManifest | None = None) -> dict:
    """Fit every block of the manifest and test each dimension for heterogeneity."""
    if manifest is None:
        manifest = BlockManifest.load(config.blocks)
    blocks = load_blocks(manifest)
    full, first, second = fit_all(blocks, config.model, config.gamma, config.shuffle_seed)
    report = evaluate_dimensions(full, first, second, config.alpha, config.gamma, config.weight)

    first_by_id = {f.block_id: f for f in first}
    dimensions, extremes = [], []
    weight = None
    for j, outcomes in report.per_dim.items():
        entry = {"dim": j, "feature": manifest.features[j - 1]}
        for fam in FAMILIES:
            entry[fam] = asdict(outcomes[fam])
        dimensions.append(entry)
        e = outcomes["ect"]
        extremes.append({
            "dim": j,
            "feature": manifest.features[j - 1],
            "max_block": e.k_max,
            "max_estimate": float(first_by_id[e.k_max].theta_hat[j - 1]),
            "min_block": e.k_min,
            "min_estimate": float(first_by_id[e.k_min].theta_hat[j - 1]),
        })
        weight = outcomes["combined"].weight
    result = {
        "K": len(blocks),
        "p": report.p,
        "block_ids": [b.block_id for b in blocks],
        "n_per_block": [b.n for b in blocks],
        "features": list(manifest.features),
        "p_threshold": report.p_threshold,
        "critical_value": report.critical_value,
        "weight": weight,
        "dimensions": dimensions,
        "extremes": extremes,
        "rejected": {fam: list(report.rejected.get(fam, [])) for fam in FAMILIES},
        "warnings": list(report.warnings),
    }
    return _document(config, result)


def run_simulate_command(config: RunConfig) -> tuple[dict, SimResult]:
    sim = config.sim_config()
    if config.command == "coverage":
        levels = config.levels if config.levels is not None else DEFAULT_LEVELS
        res = coverage_table(sim, levels, threads=config.threads)
    else:
        res = run_experiment(sim, threads=config.threads, levels=config.levels)
    body = res.to_dict()
    body.pop("config")
    return _document(config, body), res


def run_power_command(config: RunConfig) -> dict:
    if config.beta is None:
        raise ConfigError("power-calc needs --beta")
    alt = LocalAlternative(config.K, config.n, config.beta, config.c, config.sigma, config.gamma)
    smin, splus = config._sigma_bounds()
    snr_t = snr_ect(alt)
    verdict = classify_regime(alt, smin, splus)
    result = {
        "detection_boundary": detection_boundary(alt.beta),
        "epsilon": alt.epsilon,
        "mu": alt.mu,
        "snr_wald": snr_wald(alt),
        "snr_ect": snr_t.value,
        "snr_ect_valid": snr_t.valid,
        "ect_threshold_lower": ect_threshold(alt.beta, smin, alt.gamma),
        "ect_threshold_upper": ect_threshold(alt.beta, splus, alt.gamma),
        "verdict": verdict.to_dict(),
    }
    return _document(config, result)


def run_gamma_command(config: RunConfig) -> dict:
    g = gamma_recommendation(config.n, config.mu, config.K, config.eps)
    result = {
        "gamma": g,
        "log_error_bound": gamma_error_bound(g, config.n, config.mu, config.K, config.eps),
        "grid_step": 0.01,
    }
    return _document(config, result)


def execute(config: RunConfig) -> dict:
    """Run ``config`` and return the output document."""
    if config.command == "test":
        return run_test_command(config)
    if config.command in ("simulate", "coverage"):
        return run_simulate_command(config)[0]
    if config.command == "power-calc":
        return run_power_command(config)
    return run_gamma_command(config)


def sim_result_from_document(doc: dict) -> SimResult:
    """Rebuild the :class:`SimResult` of a simulate/coverage document."""
    known = {f.name for f in fields(SimConfig)}
    cfg = {k: v for k, v in doc["config"].items() if k in known}
    return SimResult.from_dict({**doc["result"], "config": cfg})


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _check_finite(obj: Any, where: str = "") -> None:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise NumericalError(f"non-finite value at {where or '/'}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}/{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def dumps_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def _is_dim_table(value: Any) -> bool:
    return (
        isinstance(value, list)
        and len(value) > 0
        and all(isinstance(v, dict) and isinstance(v.get("dim"), int) for v in value)
    )


def _flatten(obj: dict, prefix: str, rows: list, dim: str = "", entity: str | None = None) -> None:
    for key, value in obj.items():
        path = f"{prefix}/{key}" if prefix else key
        if entity is not None:
            # inside a per-dimension record: metric carries the nested path
            if isinstance(value, dict) and value:
                _flatten(value, path, rows, dim, entity)
            else:
                rows.append((entity, dim, path, json.dumps(value)))
        elif _is_dim_table(value):
            for rec in value:
                d = str(rec["dim"])
                _flatten({k: v for k, v in rec.items() if k != "dim"}, "", rows, d, path)
        elif isinstance(value, dict) and value:
            _flatten(value, path, rows)
        else:
            parent, _, leaf = path.rpartition("/")
            rows.append((parent, "", leaf, json.dumps(value)))


def to_csv_rows(doc: dict) -> list[tuple[str, str, str, str]]:
    """Flatten a document into ``(entity, dim, metric, value)`` rows.

    Scalars and lists become one row each with a JSON-encoded value;
    ``entity`` is the ``/``-joined path of the enclosing object.  Lists of
    per-dimension records become one row per (record, field) with ``dim``
    filled in.
    """
    rows: list = []
    _flatten(doc, "", rows)
    return rows


def dumps_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(to_csv_rows(doc))
    return buf.getvalue()


def _set_path(target: dict, parts: Sequence[str], value: Any) -> None:
    for part in parts[:-1]:
        target = target.setdefault(part, {})
    target[parts[-1]] = value


def from_csv_rows(rows: Sequence[Sequence[str]]) -> dict:
    """Inverse of :func:`to_csv_rows`."""
    doc: dict = {}
    tables: dict[str, dict[int, dict]] = {}
    for entity, dim, metric, value in rows:
        v = json.loads(value)
        if dim == "":
            parts = [p for p in entity.split("/") if p] + [metric]
            _set_path(doc, parts, v)
        else:
            rec = tables.setdefault(entity, {}).setdefault(int(dim), {"dim": int(dim)})
            _set_path(rec, metric.split("/"), v)
    for entity, recs in tables.items():
        _set_path(doc, entity.split("/"), [recs[d] for d in sorted(recs)])
    return doc


def loads_csv(text: str) -> dict:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != CSV_HEADER:
        raise ConfigError(f"expected CSV header {','.join(CSV_HEADER)}")
    return from_csv_rows([r for r in reader if r])


def loads(text: str, fmt: str = "json") -> dict:
    return json.loads(text) if fmt == "json" else loads_csv(text)


def emit(doc: dict, fmt: str = "json", path: str | os.PathLike | None = None, stream=None) -> str:
    """Serialize ``doc`` and write it to ``path`` (or ``stream`` when no path)."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}")
    _check_finite(doc)
    text = dumps_json(doc) if fmt == "json" else dumps_csv(doc)
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None
    elif stream is not None:
        stream.write(text)
    return text
