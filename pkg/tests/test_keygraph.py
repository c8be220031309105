"""Tests for key graphs, augmentation and permutations."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadmesh.crypto import enumerate_valid_keys, validate_public_key
from roadmesh.exceptions import GraphError, InvalidPermutation, NotSymmetric
from roadmesh.keygraph import (
    CANDIDATE_CYCLES,
    Adjacency6,
    Cycle6,
    Matrix6,
    Permutation6,
    apply_perm_to_cycle,
    augment,
    augment_positions,
    conjugate,
    find_hamiltonian,
    format_matrix,
    graph_to_key,
    key_bits,
    key_to_graph,
    permute_rows,
    verify_hamiltonian,
)

STARTING = ["001100", "001001", "110000", "100010", "000101", "010010"]
TRANSFORMED = ["001111", "001011", "110010", "100011", "111101", "110110"]
ISOMORPHIC = ["110110", "111101", "110010", "100011", "001011", "001111"]

valid_keys = st.sampled_from(enumerate_valid_keys())
perms = st.permutations([1, 2, 3, 4, 5, 6]).map(Permutation6.of)


def test_worked_example_starting_graph():
    """Test key 12869 produces the printed starting graph."""
    assert key_bits(12869) == "011001001000101"
    assert key_to_graph(12869).rows() == STARTING


def test_worked_example_augmentation():
    """Test flipping positions 4, 5, 8, 11 and 14 gives the transformed graph."""
    transformed = augment_positions(key_to_graph(12869), [4, 5, 8, 11, 14])
    assert key_bits(graph_to_key(transformed)) == "011111011010111"
    assert transformed.rows() == TRANSFORMED


def test_worked_example_row_permutation():
    """Test the random vector [6, 5, 3, 4, 2, 1] reorders rows as printed."""
    transformed = Adjacency6(Matrix6.from_rows(TRANSFORMED).array)
    assert permute_rows(transformed, Permutation6.of([6, 5, 3, 4, 2, 1])).rows() == ISOMORPHIC


def test_format_matrix_uses_six_spaced_rows():
    """Test the printed layout of a matrix."""
    text = format_matrix(key_to_graph(12869))
    assert text.splitlines()[0] == "0 0 1 1 0 0"
    assert len(text.splitlines()) == 6


def test_exactly_sixty_valid_keys():
    """Test the valid key count equals the number of labeled 6-cycles, 6!/(6*2)."""
    keys = enumerate_valid_keys()
    assert len(keys) == 60
    assert len(CANDIDATE_CYCLES) == 60
    assert 12869 in keys


def test_two_triangles_are_not_a_key():
    """Test a 2-regular graph made of two triangles is rejected."""
    m = np.zeros((6, 6), dtype=np.uint8)
    for u, v in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]:
        m[u, v] = m[v, u] = 1
    key = graph_to_key(Adjacency6(m))
    assert not validate_public_key(key)


def test_key_validation_edge_cases():
    """Test out-of-range values and bit strings."""
    assert not validate_public_key(-1)
    assert not validate_public_key(1 << 15)
    assert validate_public_key("011001001000101")
    assert not validate_public_key("01100100100010")
    assert not validate_public_key("01100100100010x")


def test_adjacency_invariants():
    """Test asymmetric and looped matrices are refused."""
    m = np.zeros((6, 6), dtype=np.uint8)
    m[0, 1] = 1
    with pytest.raises(NotSymmetric):
        Adjacency6(m)
    m = np.eye(6, dtype=np.uint8)
    with pytest.raises(GraphError):
        Adjacency6(m)
    with pytest.raises(GraphError):
        key_to_graph(1 << 15)


def test_bad_flip_and_permutation():
    """Test flip positions and permutations are range checked."""
    with pytest.raises(GraphError):
        augment_positions(key_to_graph(12869), [16])
    with pytest.raises(InvalidPermutation):
        Permutation6.of([1, 1, 2, 3, 4, 5])


def test_cycle_canonical_form():
    """Test rotations and reversals of a cycle compare equal."""
    assert Cycle6.of([3, 1, 2, 4, 5, 6]) == Cycle6.of([1, 2, 4, 5, 6, 3])
    assert Cycle6.of([1, 3, 6, 5, 4, 2]) == Cycle6.of([1, 2, 4, 5, 6, 3])
    assert str(Cycle6.of([1, 2, 3, 4, 5, 6])) == "1-2-3-4-5-6"


@given(valid_keys)
def test_key_graph_round_trip(key):
    """Test key to graph to key is the identity on valid keys."""
    g = key_to_graph(key)
    assert graph_to_key(g) == key
    assert g.degrees() == [2] * 6
    assert verify_hamiltonian(g, find_hamiltonian(g))


@given(valid_keys, st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=200)
def test_augmentation_only_adds_edges(key, seed):
    """Test augmentation keeps every original edge and the Hamiltonian cycle."""
    g = key_to_graph(key)
    aug = augment(g, np.random.default_rng(seed), p_aug=0.5)
    assert aug.contains(g)
    assert aug.edge_count() >= g.edge_count()
    assert verify_hamiltonian(aug, find_hamiltonian(g))


@given(valid_keys, perms)
@settings(max_examples=200)
def test_conjugation_carries_the_cycle(key, p):
    """Test relabeling moves the Hamiltonian cycle along with the graph."""
    g = key_to_graph(key)
    cycle = find_hamiltonian(g)
    h = conjugate(g, p)
    assert verify_hamiltonian(h, apply_perm_to_cycle(cycle, p))
    assert conjugate(h, p.inverse()) == g


def test_augmentation_extremes():
    """Test p_aug 0 leaves the graph alone and p_aug 1 completes it."""
    g = key_to_graph(12869)
    rng = np.random.default_rng(1)
    assert augment(g, rng, p_aug=0.0) == g
    assert augment(g, rng, p_aug=1.0).edge_count() == 15
    assert g.complement_positions() == [1, 4, 5, 7, 8, 10, 11, 12, 14]
