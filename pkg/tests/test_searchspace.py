"""Cell encoding, validation, canonical hashing, enumeration."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from wsnaslab.searchspace import (
    CellEncoding,
    SearchSpaceSpec,
    canonical_hash,
    enumerate_space,
    is_valid,
    make_chain_space,
    partition_by_output_edges,
    validate_encoding,
)

MICRO = SearchSpaceSpec()
TINY = SearchSpaceSpec(n_nodes=1, ops=("conv3x3", "conv1x1"))
EDGE2 = SearchSpaceSpec(
    n_nodes=2, ops=("conv3x3", "conv1x1"), op_placement="edge",
    merge_rule="sum", channel_mode="fixed",
)


# ------------------------------------------------------------- oracle

def brute_force_isomorphic(spec: SearchSpaceSpec, a: CellEncoding, b: CellEncoding) -> bool:
    """Ground truth equivalence: try every intermediate-node bijection.

    A bijection fixes the input and output nodes and must map the edge set
    and the op labelling of one encoding exactly onto the other.
    """
    n = spec.n_nodes
    out = spec.output_node
    if len(a.edges) != len(b.edges):
        return False

    def relabel(v: int, perm: tuple[int, ...]) -> int:
        return perm[v - 1] if 1 <= v <= n else v

    b_edges = set(b.edges)
    for perm in itertools.permutations(range(1, n + 1)):
        # edges are directed; a mapped edge must land in b exactly as (u, v)
        mapped = {(relabel(u, perm), relabel(v, perm)) for u, v in a.edges}
        if mapped != b_edges:
            continue
        if spec.op_placement == "node":
            ok = all(a.ops[v - 1] == b.ops[perm[v - 1] - 1] for v in range(1, n + 1))
        else:
            ok = all(
                a.edge_op((u, v)) == b.edge_op((relabel(u, perm), relabel(v, perm)))
                for u, v in a.edges
            )
        if ok:
            return True
    return False


def all_valid_raw(spec: SearchSpaceSpec) -> list[CellEncoding]:
    index = enumerate_space(spec)
    # regenerate the raw stream: every valid encoding, not just representatives
    raw = []
    possible = spec.possible_edges() if spec.topology_mode == "dag" else spec.chain_edges()
    for mask in range(1 << len(possible)):
        edges = tuple(e for i, e in enumerate(possible) if mask >> i & 1)
        n_sites = spec.n_nodes if spec.op_placement == "node" else len(edges)
        for ops in itertools.product(range(spec.num_ops), repeat=n_sites):
            enc = CellEncoding(spec.n_nodes, edges, ops)
            if is_valid(spec, enc):
                raw.append(enc)
    assert len(raw) == index.raw_count
    return raw


@pytest.mark.parametrize("spec", [TINY, MICRO, EDGE2], ids=lambda s: s.space_id)
def test_canonical_hash_agrees_with_brute_force(spec):
    """Hash equality must coincide with permutation isomorphism, pairwise."""
    raw = all_valid_raw(spec)
    assert len(raw) <= 200
    hashes = [canonical_hash(spec, e) for e in raw]
    for i in range(len(raw)):
        for j in range(i + 1, len(raw)):
            iso = brute_force_isomorphic(spec, raw[i], raw[j])
            assert iso == (hashes[i] == hashes[j]), (
                f"hash disagrees with brute force for {raw[i]} vs {raw[j]}"
            )


def test_chain_space_brute_force():
    spec = make_chain_space(SearchSpaceSpec(n_nodes=2, ops=("conv3x3", "conv1x1")))
    raw = all_valid_raw(spec)
    hashes = [canonical_hash(spec, e) for e in raw]
    for i in range(len(raw)):
        for j in range(i + 1, len(raw)):
            assert brute_force_isomorphic(spec, raw[i], raw[j]) == (hashes[i] == hashes[j])


# -------------------------------------------------------------- spec

def test_possible_edges_exclude_direct_input_output():
    edges = MICRO.possible_edges()
    assert len(edges) == 5
    assert (0, MICRO.output_node) not in edges
    assert all(i < j for i, j in edges)


def test_spec_pairing_rules():
    with pytest.raises(ValueError):
        SearchSpaceSpec(merge_rule="concat", channel_mode="fixed")
    with pytest.raises(ValueError):
        SearchSpaceSpec(merge_rule="sum", channel_mode="dynamic")
    with pytest.raises(ValueError):
        SearchSpaceSpec(op_placement="edge", merge_rule="concat", channel_mode="dynamic")


def test_spec_rejects_unknown_op_and_duplicates():
    with pytest.raises(ValueError):
        SearchSpaceSpec(ops=("conv3x3", "conv9x9"))
    with pytest.raises(ValueError):
        SearchSpaceSpec(ops=("conv3x3", "conv3x3"))


def test_spec_dict_round_trip():
    for spec in (MICRO, TINY, EDGE2, make_chain_space(MICRO)):
        assert SearchSpaceSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        SearchSpaceSpec.from_dict({**MICRO.to_dict(), "bogus": 1})


# -------------------------------------------------------- validation

def test_validation_reason_codes():
    out = MICRO.output_node
    chain = ((0, 1), (1, 2), (2, 3))

    enc = CellEncoding(2, chain + ((0, out),), (0, 0))
    assert "forbidden_edge" in validate_encoding(MICRO, enc)

    enc = CellEncoding(2, chain, (0, 99))
    assert validate_encoding(MICRO, enc) == ["bad_op"]

    enc = CellEncoding(2, chain, (0,))
    assert validate_encoding(MICRO, enc) == ["bad_op"]

    cspec = make_chain_space(MICRO)
    enc = CellEncoding(2, ((0, 1), (1, 3), (2, 3), (0, 2)), (0, 0))
    assert "chain_violation" in validate_encoding(cspec, enc)

    # node 2 has no outgoing edge: off every input->output path
    enc = CellEncoding(2, ((0, 1), (1, 3), (0, 2)), (0, 0))
    assert validate_encoding(MICRO, enc) == ["dangling"]

    # node 2 unreachable from the input
    enc = CellEncoding(2, ((0, 1), (1, 3), (2, 3)), (0, 0))
    assert validate_encoding(MICRO, enc) == ["dangling"]

    enc = CellEncoding(3, ((0, 1), (1, 4)), (0, 0, 0))
    assert validate_encoding(MICRO, enc) == ["bad_shape"]

    enc = CellEncoding(2, chain, (0, 1))
    assert validate_encoding(MICRO, enc) == []
    assert is_valid(MICRO, enc)


def test_edge_placement_op_count_follows_edges():
    enc = CellEncoding(2, ((0, 1), (1, 2), (2, 3)), (0, 1, 0))
    assert is_valid(EDGE2, enc)
    short = CellEncoding(2, ((0, 1), (1, 2), (2, 3)), (0, 1))
    assert "bad_op" in validate_encoding(EDGE2, short)


def test_encoding_rejects_malformed_edges():
    with pytest.raises(ValueError):
        CellEncoding(2, ((1, 1),), (0, 0))
    with pytest.raises(ValueError):
        CellEncoding(2, ((2, 1),), (0, 0))
    with pytest.raises(ValueError):
        CellEncoding(2, ((0, 1), (0, 1)), (0, 0))
    with pytest.raises(ValueError):
        CellEncoding(2, ((0, 9),), (0, 0))


def test_from_matrix_round_trip():
    enc = CellEncoding(2, ((0, 1), (1, 2), (2, 3)), (1, 2))
    back = CellEncoding.from_matrix(enc.adjacency(), enc.ops)
    assert back == enc
    lower = np.zeros((4, 4))
    lower[2, 1] = 1
    with pytest.raises(ValueError):
        CellEncoding.from_matrix(lower, (0, 0))


def test_encoding_dict_round_trip():
    enc = CellEncoding(2, ((0, 2), (0, 1), (1, 3), (2, 3)), (2, 0))
    assert CellEncoding.from_dict(enc.to_dict()) == enc
    with pytest.raises(ValueError):
        CellEncoding.from_dict({"nodes": 2, "edges": [], "ops": [], "extra": 1})


# ------------------------------------------------------------ hashing

def test_hash_invariant_under_node_swap():
    parallel = ((0, 1), (0, 2), (1, 3), (2, 3))
    a = CellEncoding(2, parallel, (0, 1))
    b = CellEncoding(2, parallel, (1, 0))
    assert canonical_hash(MICRO, a) == canonical_hash(MICRO, b)
    c = CellEncoding(2, parallel, (0, 2))
    assert canonical_hash(MICRO, a) != canonical_hash(MICRO, c)


def test_hash_distinguishes_op_rotation_on_chain():
    chain = ((0, 1), (1, 2), (2, 3))
    a = CellEncoding(2, chain, (0, 1))
    b = CellEncoding(2, chain, (1, 0))
    assert canonical_hash(MICRO, a) != canonical_hash(MICRO, b)


def test_hash_format_and_stability():
    enc = CellEncoding(2, ((0, 1), (1, 2), (2, 3)), (0, 1))
    h = canonical_hash(MICRO, enc)
    assert len(h) == 16
    assert set(h) <= set("0123456789abcdef")
    assert canonical_hash(MICRO, enc) == h


def test_hash_rejects_invalid_encoding():
    with pytest.raises(ValueError):
        canonical_hash(MICRO, CellEncoding(2, ((0, 1), (1, 3), (0, 2)), (0, 0)))


# -------------------------------------------------------- enumeration

def test_micro_space_counts():
    index = enumerate_space(MICRO)
    assert index.raw_count == 45
    assert index.unique_count == 42
    doubles = [h for h, m in index.multiplicity.items() if m == 2]
    assert len(doubles) == 3
    assert all(m in (1, 2) for m in index.multiplicity.values())
    assert sum(index.multiplicity.values()) == 45


def test_tiny_space_counts():
    index = enumerate_space(TINY)
    assert index.raw_count == 2
    assert index.unique_count == 2


def test_chain_space_counts():
    spec = make_chain_space(SearchSpaceSpec(n_nodes=3, ops=("conv3x3", "conv1x1", "avgpool3x3")))
    index = enumerate_space(spec)
    assert index.raw_count == 27
    assert index.unique_count == 27


def test_edge_space_counts():
    index = enumerate_space(EDGE2)
    assert index.raw_count == 88
    assert index.unique_count == 82


def test_representative_is_minimal_and_valid():
    index = enumerate_space(MICRO)
    for h, enc in index.representatives.items():
        assert canonical_hash(MICRO, enc) == h
        assert is_valid(MICRO, enc)
    assert index.hashes == sorted(index.hashes)


def test_enumeration_guard_trips():
    big = make_chain_space(SearchSpaceSpec(n_nodes=11, ops=("conv3x3", "conv1x1", "avgpool3x3")))
    with pytest.raises(ValueError):
        enumerate_space(big)


# ---------------------------------------------------------- partition

def test_partition_micro():
    subs = partition_by_output_edges(MICRO)
    sizes = {s.k: len(s.arch_hashes) for s in subs}
    assert sizes == {1: 18, 2: 24}
    assert [s.sub_space_id for s in subs] == ["k1", "k2"]
    union = set()
    for s in subs:
        assert not union & set(s.arch_hashes)
        union.update(s.arch_hashes)
    assert union == set(enumerate_space(MICRO).hashes)


def test_partition_matches_output_in_degree():
    index = enumerate_space(MICRO)
    for s in partition_by_output_edges(MICRO):
        for h in s.arch_hashes:
            assert index.representatives[h].output_in_degree() == s.k


def test_partition_needs_dynamic_channels():
    with pytest.raises(ValueError):
        partition_by_output_edges(EDGE2)
