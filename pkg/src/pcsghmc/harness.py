"""Run orchestration: archive serialization, config assembly, experiment
manifests, and the executors behind the CLI subcommands.

The binary archive is little-endian: a fixed header (magic, version, D, K,
kept steps N, thinning, seed, config hash), a length-prefixed JSON metadata
block, then the arrays (kept step indices, per-chain row-major float64
samples, energies, final frame, spreads).  The archive bytes are a pure
function of the run config and seed; the measured wall time lives in a
sidecar timing file so reruns stay byte-identical.  The optional CSV mirror
prints every float with 17 significant digits so it parses back bit-exact.
"""

from __future__ import annotations

import csv
import json
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .diagnostics import (ChainArchive, config_digest, mean_ess, neg_elbo,
                          report_rows)
from .errors import ArchiveError, ConfigError
from .hmc import HmcConfig, hmc_run
from .moments import DecaySchedule
from .sampler import PhaseSchedule, RunConfig, SampleRun, run
from .targets import build_target

MAGIC = b"APMC"
VERSION = 1
_HEADER = struct.Struct("<IIIIIq")     # version, D, K, N, thinning, seed


# ---------------------------------------------------------------------------
# binary archive

def write_archive(path, archive: ChainArchive) -> None:
    archive.validate()
    n_kept, n_chains, dim = archive.samples.shape
    if len(archive.config_hash) != 64:
        raise ArchiveError("config hash must be 64 hex characters")
    meta = {
        "method": archive.method,
        "target": archive.target,
        "n_steps": int(archive.n_steps),
        "extra": archive.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(_HEADER.pack(VERSION, dim, n_chains, n_kept,
                                 archive.thinning, archive.seed))
            f.write(archive.config_hash.encode("ascii"))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(np.ascontiguousarray(archive.kept_steps,
                                         dtype="<i8").tobytes())
            # per chain, row-major over (steps, dims)
            f.write(np.ascontiguousarray(
                archive.samples.transpose(1, 0, 2), dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(
                archive.energies.T, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(archive.frame_p,
                                         dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(archive.sigmas,
                                         dtype="<f8").tobytes())
    except OSError as exc:
        raise ArchiveError(f"cannot write archive {path}: {exc}") from exc


def timing_path(archive_path) -> Path:
    p = Path(archive_path)
    return p.with_name(p.stem + "_timing.json")


def write_timing(archive_path, archive: ChainArchive) -> None:
    """Persist the measured wall time next to the (deterministic) archive."""
    with open(timing_path(archive_path), "w") as f:
        json.dump({"runtime_s": float(archive.runtime_s)}, f)


def _read_timing(archive_path) -> float:
    p = timing_path(archive_path)
    if not p.exists():
        return 0.0
    with open(p) as f:
        return float(json.load(f)["runtime_s"])


def _take(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ArchiveError(f"archive truncated while reading {what}")
    return data


def read_archive(path) -> ChainArchive:
    try:
        with open(path, "rb") as f:
            if _take(f, 4, "magic") != MAGIC:
                raise ArchiveError(f"{path} is not a chain archive")
            version, dim, n_chains, n_kept, thinning, seed = _HEADER.unpack(
                _take(f, _HEADER.size, "header"))
            if version != VERSION:
                raise ArchiveError(f"unsupported archive version {version}")
            config_hash = _take(f, 64, "config hash").decode("ascii")
            (blob_len,) = struct.unpack("<I", _take(f, 4, "metadata length"))
            meta = json.loads(_take(f, blob_len, "metadata"))
            kept = np.frombuffer(_take(f, 8 * n_kept, "kept steps"),
                                 dtype="<i8")
            samples = np.frombuffer(
                _take(f, 8 * n_kept * n_chains * dim, "samples"),
                dtype="<f8").reshape(n_chains, n_kept, dim)
            energies = np.frombuffer(
                _take(f, 8 * n_kept * n_chains, "energies"),
                dtype="<f8").reshape(n_chains, n_kept)
            frame_p = np.frombuffer(_take(f, 8 * dim * dim, "frame"),
                                    dtype="<f8").reshape(dim, dim)
            sigmas = np.frombuffer(_take(f, 8 * dim, "sigmas"), dtype="<f8")
            if f.read(1):
                raise ArchiveError(f"trailing bytes in archive {path}")
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    archive = ChainArchive(
        samples=np.ascontiguousarray(samples.transpose(1, 0, 2)),
        energies=np.ascontiguousarray(energies.T),
        kept_steps=kept.copy(),
        frame_p=frame_p.copy(),
        sigmas=sigmas.copy(),
        seed=seed,
        config_hash=config_hash,
        method=meta["method"],
        target=meta["target"],
        thinning=thinning,
        n_steps=meta["n_steps"],
        runtime_s=_read_timing(path),
        extra=meta["extra"],
    )
    archive.validate()
    return archive


# ---------------------------------------------------------------------------
# CSV mirrors and reports

def _f17(x) -> str:
    return format(float(x), ".17g")


def write_csv_mirror(path, archive: ChainArchive) -> None:
    n_kept, n_chains, dim = archive.samples.shape
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["record", "step", "chain"]
                   + [f"v{d}" for d in range(dim)])
        for t in range(n_kept):
            step = int(archive.kept_steps[t])
            for k in range(n_chains):
                w.writerow(["sample", step, k,
                            *map(_f17, archive.samples[t, k])])
        for t in range(n_kept):
            step = int(archive.kept_steps[t])
            for k in range(n_chains):
                w.writerow(["energy", step, k, _f17(archive.energies[t, k])])
        for d in range(dim):
            w.writerow(["frame", d, "", *map(_f17, archive.frame_p[d])])
        w.writerow(["sigma", "", "", *map(_f17, archive.sigmas)])


def write_report_csv(path, archive: ChainArchive,
                     include_elbo: bool = True) -> None:
    header, rows = report_rows(archive, include_elbo=include_elbo)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_f17(x) if isinstance(x, float) else x for x in row])


# ---------------------------------------------------------------------------
# config assembly

def _check_keys(mapping: dict, allowed, what: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {what} option(s): {sorted(unknown)}")


def _decay_from(value) -> DecaySchedule:
    if isinstance(value, DecaySchedule):
        return value
    if isinstance(value, (list, tuple)) and len(value) == 3:
        return DecaySchedule(*map(int, value))
    if isinstance(value, dict):
        _check_keys(value, ("t_hat_min", "t_hat_max", "t_burn"),
                    "decay schedule")
        return DecaySchedule(**{k: int(v) for k, v in value.items()})
    raise ConfigError(f"bad decay schedule spec: {value!r}")


def runconfig_from_mapping(mapping: dict) -> RunConfig:
    mapping = dict(mapping)
    names = {f.name for f in fields(RunConfig)}
    _check_keys(mapping, names, "sampler")
    if "schedule" in mapping and isinstance(mapping["schedule"], dict):
        sched = mapping["schedule"]
        _check_keys(sched, {f.name for f in fields(PhaseSchedule)},
                    "phase schedule")
        mapping["schedule"] = replace(PhaseSchedule(),
                                      **{k: int(v) for k, v in sched.items()})
    for key in ("mean_schedule", "var_schedule", "pcd_schedule"):
        if key in mapping:
            mapping[key] = _decay_from(mapping[key])
    config = RunConfig(**mapping)
    config.validate()
    return config


def hmcconfig_from_mapping(mapping: dict) -> HmcConfig:
    names = {f.name for f in fields(HmcConfig)}
    _check_keys(mapping, names, "hmc")
    config = HmcConfig(**mapping)
    config.validate()
    return config


def load_config_tree(path) -> dict:
    try:
        with open(path) as f:
            tree = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping in {path}")
    return tree


_TREE_KEYS = ("method", "target", "seed", "out", "csv", "thin",
              "checkpoint", "sampler", "hmc")


@dataclass
class RunSpec:
    """One fully resolved sampling run (file defaults + CLI overrides)."""

    method: str = "apm"
    target: str = "gauss2d"
    seed: int = 0
    out: Path = Path(".")
    csv: bool = False
    thin: int | None = None
    checkpoint: str | None = None
    sampler: dict = field(default_factory=dict)
    hmc: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, tree: dict, **overrides) -> "RunSpec":
        _check_keys(tree, _TREE_KEYS, "run config")
        spec = cls()
        merged = dict(tree)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        for key, value in merged.items():
            setattr(spec, key, value)
        spec.out = Path(spec.out)
        if spec.method not in ("apm", "hmc"):
            raise ConfigError(f"unknown method {spec.method!r}")
        if spec.thin is not None and int(spec.thin) < 1:
            raise ConfigError("thin must be >= 1")
        return spec

    def stem(self) -> str:
        return f"{self.method}_{self.target}_seed{self.seed}"


def thin_archive(archive: ChainArchive, k: int) -> ChainArchive:
    """Keep every k-th archived step (used for samplers with no built-in
    thinning)."""
    if k <= 1:
        return archive
    return replace(
        archive,
        samples=archive.samples[::k].copy(),
        energies=archive.energies[::k].copy(),
        kept_steps=archive.kept_steps[::k].copy(),
        thinning=archive.thinning * k,
    )


def archive_from_run(result: SampleRun, runtime_s: float) -> ChainArchive:
    config = result.config
    return ChainArchive(
        samples=result.samples,
        energies=result.energies,
        kept_steps=result.kept_steps,
        frame_p=result.frame.P,
        sigmas=result.sigmas,
        seed=config.seed,
        config_hash=config_digest(config),
        method="apm",
        target=str(config.target),
        thinning=config.thinning,
        n_steps=config.schedule.n_steps,
        runtime_s=runtime_s,
        extra={"eta": config.eta, "rotate": config.rotate},
    )


def execute_run(spec: RunSpec, progress=None) -> ChainArchive:
    """Run the configured sampler and return its archive (not yet written)."""
    target = build_target(spec.target)
    if spec.method == "apm":
        options = dict(spec.sampler)
        options["target"] = spec.target
        options["seed"] = int(spec.seed)
        if spec.thin is not None:
            options["thinning"] = int(spec.thin)
        if spec.checkpoint is not None:
            options["strategy_source"] = spec.checkpoint
        config = runconfig_from_mapping(options)
        start = time.perf_counter()
        result = run(config, target=target, progress=progress)
        return archive_from_run(result, time.perf_counter() - start)
    options = dict(spec.hmc)
    options["seed"] = int(spec.seed)
    config = hmcconfig_from_mapping(options)
    archive = hmc_run(config, target)
    archive.target = spec.target
    if spec.thin is not None:
        archive = thin_archive(archive, int(spec.thin))
    return archive


# ---------------------------------------------------------------------------
# experiment manifest and comparison table

COMPARE_COLUMNS = ["method", "target", "seed", "kld_plus_c", "mean_ess",
                   "wall_clock_s", "ess_per_hour", "status"]


@dataclass
class ManifestEntry:
    method: str
    target: str
    seeds: list
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentManifest:
    entries: list
    out: Path
    report: str = "compare.csv"
    parallel: bool = False

    @classmethod
    def from_file(cls, path) -> "ExperimentManifest":
        tree = load_config_tree(path)
        _check_keys(tree, ("runs", "out", "report", "parallel"), "manifest")
        entries = []
        for item in tree.get("runs", []):
            _check_keys(item, ("method", "target", "seeds", "overrides"),
                        "manifest run")
            if "seeds" not in item or not item["seeds"]:
                raise ConfigError(
                    "manifest runs need explicit seeds (no clock seeding)")
            entry = ManifestEntry(
                method=item.get("method", "apm"),
                target=item.get("target", "gauss2d"),
                seeds=[int(s) for s in item["seeds"]],
                overrides=dict(item.get("overrides", {})),
            )
            if entry.method not in ("apm", "hmc"):
                raise ConfigError(f"unknown method {entry.method!r}")
            ckpt = entry.overrides.get("strategy_source")
            if (entry.method == "apm" and ckpt and ckpt != "constant"
                    and not Path(ckpt).exists()):
                raise ConfigError(f"checkpoint {ckpt} does not exist")
            entries.append(entry)
        return cls(entries=entries,
                   out=Path(tree.get("out", ".")),
                   report=tree.get("report", "compare.csv"),
                   parallel=bool(tree.get("parallel", False)))


def _compare_row(task) -> list:
    method, target, seed, overrides = task
    spec = RunSpec.resolve({}, method=method, target=target, seed=seed)
    if method == "apm":
        spec.sampler = overrides
    else:
        spec.hmc = overrides
    try:
        archive = execute_run(spec)
        m_ess = mean_ess(archive)
        kld = neg_elbo(archive)
        hours = archive.runtime_s / 3600.0
        return [method, target, seed, kld, m_ess, archive.runtime_s,
                m_ess / hours if hours > 0 else float("nan"), "ok"]
    except Exception as exc:   # partial failures become rows, run continues
        return [method, target, seed, "", "", "", "",
                f"failed: {type(exc).__name__}: {exc}"]


def run_comparison(manifest: ExperimentManifest, progress=None) -> list:
    tasks = [(e.method, e.target, seed, e.overrides)
             for e in manifest.entries for seed in e.seeds]
    rows = []
    if manifest.parallel and tasks:
        with ProcessPoolExecutor() as pool:
            for i, row in enumerate(pool.map(_compare_row, tasks)):
                rows.append(row)
                if progress:
                    progress(i + 1, len(tasks), row)
    else:
        for i, task in enumerate(tasks):
            row = _compare_row(task)
            rows.append(row)
            if progress:
                progress(i + 1, len(tasks), row)
    return rows


def write_compare_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COMPARE_COLUMNS)
        for row in rows:
            w.writerow([_f17(x) if isinstance(x, float) else x for x in row])
