"""Architecture samplers for single-path super-net training.

random_nas draws uniformly over valid raw encodings by rejection: every
possible edge gets a state drawn uniformly over {absent} + ops (edge
placement) or a presence bit (node placement, ops drawn per node), which
makes every raw encoding equally likely before the validity filter.

random_a draws uniformly over unique architectures (canonical hashes) via
the enumeration index, removing encoding multiplicity bias.

fairnas samples one valid skeleton uniformly, then builds a step plan: an
independent permutation of all o ops per active site. Executing the plan
costs o forward/backward passes (pass j assigns perm[site][j] everywhere)
followed by one update with the mean gradient, so each site sees every op
exactly once per plan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .searchspace import (
    CellEncoding,
    EnumerationIndex,
    SearchSpaceSpec,
    canonical_hash,
    is_valid,
)

SAMPLER_KINDS = ("random_nas", "random_a", "fairnas")
DEFAULT_REJECTION_BUDGET = 10_000


def _candidate_edges(spec: SearchSpaceSpec) -> tuple[tuple[int, int], ...]:
    return spec.chain_edges() if spec.topology_mode == "chain" else spec.possible_edges()


def _accept(spec: SearchSpaceSpec, enc: CellEncoding, k_filter: int | None) -> bool:
    if not is_valid(spec, enc):
        return False
    return k_filter is None or enc.output_in_degree() == k_filter


def sample_random_nas(
    spec: SearchSpaceSpec,
    rng: np.random.Generator,
    budget: int = DEFAULT_REJECTION_BUDGET,
    k_filter: int | None = None,
) -> CellEncoding:
    """Uniform draw over valid raw encodings (rejection sampling)."""
    candidates = _candidate_edges(spec)
    o = spec.num_ops
    for _ in range(budget):
        if spec.op_placement == "node":
            present = rng.integers(0, 2, size=len(candidates))
            edges = tuple(e for e, p in zip(candidates, present) if p)
            ops = tuple(int(v) for v in rng.integers(0, o, size=spec.n_nodes))
        else:
            states = rng.integers(0, o + 1, size=len(candidates))
            edges = tuple(e for e, s in zip(candidates, states) if s > 0)
            ops = tuple(int(s - 1) for s in states if s > 0)
        enc = CellEncoding(spec.n_nodes, edges, ops)
        if _accept(spec, enc, k_filter):
            return enc
    raise RuntimeError(f"rejection budget of {budget} exhausted sampling {spec.space_id}")


def sample_random_a(
    index: EnumerationIndex,
    rng: np.random.Generator,
    k_filter: int | None = None,
) -> CellEncoding:
    """Uniform draw over unique architectures via the dedup index."""
    hashes = index.hashes
    if k_filter is not None:
        hashes = [h for h in hashes if index.representatives[h].output_in_degree() == k_filter]
    if not hashes:
        raise ValueError("no architectures match the sub-space filter")
    return index.representatives[hashes[int(rng.integers(0, len(hashes)))]]


def sample_skeleton(
    spec: SearchSpaceSpec,
    rng: np.random.Generator,
    budget: int = DEFAULT_REJECTION_BUDGET,
    k_filter: int | None = None,
) -> tuple[tuple[int, int], ...]:
    """Uniform draw over valid skeletons (edge sets)."""
    candidates = _candidate_edges(spec)
    probe_ops_node = tuple([0] * spec.n_nodes)
    for _ in range(budget):
        present = rng.integers(0, 2, size=len(candidates))
        edges = tuple(e for e, p in zip(candidates, present) if p)
        ops = probe_ops_node if spec.op_placement == "node" else tuple([0] * len(edges))
        enc = CellEncoding(spec.n_nodes, edges, ops)
        if _accept(spec, enc, k_filter):
            return edges
    raise RuntimeError(f"rejection budget of {budget} exhausted sampling skeletons of {spec.space_id}")


@dataclass(frozen=True)
class FairStepPlan:
    """One fairness round: a skeleton plus per-site op permutations."""

    n_nodes: int
    skeleton: tuple[tuple[int, int], ...]
    site_perms: tuple[tuple[int, ...], ...]

    @property
    def length(self) -> int:
        return len(self.site_perms[0]) if self.site_perms else 0

    def arch(self, step: int) -> CellEncoding:
        if not 0 <= step < self.length:
            raise IndexError(f"plan step {step} outside 0..{self.length - 1}")
        return CellEncoding(self.n_nodes, self.skeleton, tuple(perm[step] for perm in self.site_perms))


def fairnas_plan(
    spec: SearchSpaceSpec,
    rng: np.random.Generator,
    budget: int = DEFAULT_REJECTION_BUDGET,
    k_filter: int | None = None,
) -> FairStepPlan:
    """Sample a skeleton and one op permutation per active site."""
    skeleton = sample_skeleton(spec, rng, budget=budget, k_filter=k_filter)
    n_sites = spec.n_nodes if spec.op_placement == "node" else len(skeleton)
    perms = tuple(tuple(int(v) for v in rng.permutation(spec.num_ops)) for _ in range(n_sites))
    return FairStepPlan(spec.n_nodes, skeleton, perms)


@dataclass
class Sampler:
    """Uniform front end over the three sampler kinds."""

    kind: str
    spec: SearchSpaceSpec
    index: EnumerationIndex | None = None
    k_filter: int | None = None
    budget: int = DEFAULT_REJECTION_BUDGET

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; known: {SAMPLER_KINDS}")
        if self.kind == "random_a" and self.index is None:
            raise ValueError("random_a needs an enumeration index")

    @property
    def archs_per_step(self) -> int:
        """Forward/backward passes one training step costs."""
        return self.spec.num_ops if self.kind == "fairnas" else 1

    def draw(self, rng: np.random.Generator) -> CellEncoding:
        if self.kind == "random_nas":
            return sample_random_nas(self.spec, rng, budget=self.budget, k_filter=self.k_filter)
        if self.kind == "random_a":
            return sample_random_a(self.index, rng, k_filter=self.k_filter)
        raise ValueError("fairnas draws plans, not single encodings")

    def plan(self, rng: np.random.Generator) -> FairStepPlan:
        if self.kind != "fairnas":
            raise ValueError(f"{self.kind} has no step plans")
        return fairnas_plan(self.spec, rng, budget=self.budget, k_filter=self.k_filter)


def sampling_histogram(
    sampler: Sampler,
    draws: int,
    seed: int,
) -> dict[str, int]:
    """Visit counts per canonical hash over `draws` sampler invocations.

    A fairnas invocation visits every architecture of its plan (o per plan);
    the other samplers visit one architecture per draw.
    """
    from .nncore import named_rng

    if draws < 1:
        raise ValueError("draws must be positive")
    rng = named_rng(seed, "histogram", sampler.kind, sampler.k_filter)
    counts: dict[str, int] = {}
    for _ in range(draws):
        if sampler.kind == "fairnas":
            plan = sampler.plan(rng)
            visited = [plan.arch(j) for j in range(plan.length)]
        else:
            visited = [sampler.draw(rng)]
        for enc in visited:
            key = canonical_hash(sampler.spec, enc)
            counts[key] = counts.get(key, 0) + 1
    return counts
