"""Exhaustive micro-benchmark: stand-alone ground truth for a whole space.

Every unique architecture is trained from scratch over a set of run seeds;
the table stores per-(architecture, seed) validation and test accuracies
plus parameter counts. Ground truth for ranking metrics is the mean test
accuracy over seeds. Tables persist as line-delimited JSON: one header
record {format_version, space_id, spec, macro, protocol_digest, meta}, then
one record per entry, sorted by (arch_hash, seed) so files are byte-stable.

Jobs are pure functions of (specs, seeds); parallel builds give identical
tables to serial ones.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, SyntheticDatasetSpec, generate_dataset
from .metrics import sparse_ranks
from .nncore import stream_key
from .protocol import ProtocolConfig, train_standalone
from .searchspace import CellEncoding, EnumerationIndex, SearchSpaceSpec, enumerate_space
from .supernet import MacroParams

FORMAT_VERSION = 1


def derive_job_seed(base_seed: int, arch_hash: str, run_seed: int) -> int:
    """Independent per-job stream from (global seed, arch hash, run seed)."""
    return int(stream_key("gt-job", base_seed, arch_hash, run_seed) & 0x7FFFFFFF)


def protocol_digest(pconfig: ProtocolConfig, dspec: SyntheticDatasetSpec, base_seed: int, run_seeds: tuple[int, ...]) -> str:
    payload = json.dumps(
        {
            "protocol": pconfig.to_dict(),
            "dataset": dspec.to_dict(),
            "base_seed": base_seed,
            "run_seeds": list(run_seeds),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=8).hexdigest()


@dataclass(frozen=True)
class BenchmarkEntry:
    arch_hash: str
    encoding: CellEncoding
    seed: int
    val_accuracy: float
    test_accuracy: float
    param_count: int

    def to_dict(self) -> dict:
        return {
            "arch_hash": self.arch_hash,
            "encoding": self.encoding.to_dict(),
            "seed": self.seed,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "param_count": self.param_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkEntry":
        known = {"arch_hash", "encoding", "seed", "val_accuracy", "test_accuracy", "param_count"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown entry keys: {sorted(unknown)}")
        return cls(
            arch_hash=d["arch_hash"],
            encoding=CellEncoding.from_dict(d["encoding"]),
            seed=int(d["seed"]),
            val_accuracy=float(d["val_accuracy"]),
            test_accuracy=float(d["test_accuracy"]),
            param_count=int(d["param_count"]),
        )


@dataclass
class BenchmarkTable:
    spec: SearchSpaceSpec
    macro: MacroParams
    digest: str
    entries: list[BenchmarkEntry]
    meta: dict

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.arch_hash, e.seed))

    def hashes(self) -> list[str]:
        return sorted({e.arch_hash for e in self.entries})

    def entries_for(self, arch_hash: str) -> list[BenchmarkEntry]:
        found = [e for e in self.entries if e.arch_hash == arch_hash]
        if not found:
            raise KeyError(f"architecture {arch_hash!r} not in the table")
        return found

    def gt_mean(self, arch_hash: str) -> float:
        return float(np.mean([e.test_accuracy for e in self.entries_for(arch_hash)]))

    def val_mean(self, arch_hash: str) -> float:
        return float(np.mean([e.val_accuracy for e in self.entries_for(arch_hash)]))

    def seed_spread(self, arch_hash: str) -> float:
        accs = [e.test_accuracy for e in self.entries_for(arch_hash)]
        return float(max(accs) - min(accs))

    def max_seed_spread(self) -> float:
        return max(self.seed_spread(h) for h in self.hashes())

    def encoding_for(self, arch_hash: str) -> CellEncoding:
        return self.entries_for(arch_hash)[0].encoding

    def gt_rank(self, arch_hash: str, threshold: float = 0.0) -> int:
        """Rank counted from the worst (r_max = best).

        threshold 0: bijection onto 1..r_max, ties broken by hash.
        threshold > 0: groups share a rank per the sparse convention.
        """
        hashes = self.hashes()
        if threshold == 0.0:
            ordered = sorted(hashes, key=lambda h: (self.gt_mean(h), h))
            return ordered.index(arch_hash) + 1
        means = np.asarray([self.gt_mean(h) for h in hashes])
        best_first = sparse_ranks(means, threshold)
        worst_first = best_first.max() - best_first + 1
        return int(worst_first[hashes.index(arch_hash)])

    @property
    def r_max(self) -> int:
        return len(self.hashes())


# ------------------------------------------------------------ build

def _gt_job(args: tuple) -> dict:
    spec_d, enc_d, macro_d, pconfig_d, dspec_d, base_seed, arch_hash, run_seed = args
    spec = SearchSpaceSpec.from_dict(spec_d)
    enc = CellEncoding.from_dict(enc_d)
    macro = MacroParams.from_dict(macro_d)
    pconfig = ProtocolConfig.from_dict(pconfig_d)
    dspec = SyntheticDatasetSpec.from_dict(dspec_d)
    dataset = generate_dataset(dspec, base_seed)
    result = train_standalone(
        spec, enc, macro, pconfig, dataset,
        seed=derive_job_seed(base_seed, arch_hash, run_seed),
        arch_hash=arch_hash,
    )
    return {
        "arch_hash": arch_hash,
        "encoding": enc.to_dict(),
        "seed": run_seed,
        "val_accuracy": result.val_accuracy,
        "test_accuracy": result.test_accuracy,
        "param_count": result.param_count,
    }


def build_micro_benchmark(
    spec: SearchSpaceSpec,
    macro: MacroParams,
    pconfig: ProtocolConfig,
    dspec: SyntheticDatasetSpec,
    base_seed: int,
    run_seeds: tuple[int, ...] = (0, 1, 2),
    jobs: int = 1,
    index: EnumerationIndex | None = None,
) -> BenchmarkTable:
    """Train every unique architecture once per run seed."""
    if not run_seeds:
        raise ValueError("need at least one run seed")
    if index is None:
        index = enumerate_space(spec)
    tasks = [
        (
            spec.to_dict(),
            index.representatives[h].to_dict(),
            macro.to_dict(),
            pconfig.to_dict(),
            dspec.to_dict(),
            base_seed,
            h,
            s,
        )
        for h in index.hashes
        for s in run_seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_gt_job, tasks, chunksize=1))
    else:
        raw = [_gt_job(t) for t in tasks]
    entries = [BenchmarkEntry.from_dict(r) for r in raw]
    meta = {
        "dataset": dspec.to_dict(),
        "protocol": pconfig.to_dict(),
        "base_seed": base_seed,
        "run_seeds": list(run_seeds),
        "multiplicity": {h: index.multiplicity[h] for h in index.hashes},
    }
    table = BenchmarkTable(
        spec=spec,
        macro=macro,
        digest=protocol_digest(pconfig, dspec, base_seed, run_seeds),
        entries=entries,
        meta=meta,
    )
    table.meta["max_seed_spread"] = table.max_seed_spread()
    return table


# ------------------------------------------------------- persistence

def save_table(table: BenchmarkTable, path: str | Path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "space_id": table.spec.space_id,
        "spec": table.spec.to_dict(),
        "macro": table.macro.to_dict(),
        "protocol_digest": table.digest,
        "meta": table.meta,
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines += [json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) for e in table.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path: str | Path) -> BenchmarkTable:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty benchmark table")

    def fail(line_no: int, message: str):
        raise ValueError(f"{path}:{line_no}: {message}")

    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as e:
        fail(1, f"bad header: {e}")
    required = {"format_version", "space_id", "spec", "macro", "protocol_digest"}
    missing = required - set(header)
    if missing:
        fail(1, f"header missing keys {sorted(missing)}")
    if header["format_version"] != FORMAT_VERSION:
        fail(1, f"unsupported format_version {header['format_version']!r} (expected {FORMAT_VERSION})")
    spec = SearchSpaceSpec.from_dict(header["spec"])
    if spec.space_id != header["space_id"]:
        fail(1, f"space_id {header['space_id']!r} does not match spec {spec.space_id!r}")
    macro = MacroParams.from_dict(header["macro"])
    entries = []
    for line_no, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        try:
            entries.append(BenchmarkEntry.from_dict(json.loads(line)))
        except (json.JSONDecodeError, ValueError, KeyError, TypeError) as e:
            fail(line_no, f"bad entry: {e}")
    if not entries:
        fail(1, "table has no entries")
    return BenchmarkTable(
        spec=spec,
        macro=macro,
        digest=header["protocol_digest"],
        entries=entries,
        meta=header.get("meta", {}),
    )


__all__ = [
    "BenchmarkEntry",
    "BenchmarkTable",
    "Dataset",
    "SyntheticDatasetSpec",
    "build_micro_benchmark",
    "derive_job_seed",
    "generate_dataset",
    "load_table",
    "protocol_digest",
    "save_table",
]
