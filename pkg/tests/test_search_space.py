import numpy as np
import pytest
from hypothesis import given, strategies as st

from g2lsearch.errors import ConfigError, StructureParseError
from g2lsearch.search_space import (DilationStructure, build_global_space, decode_structure,
                                    encode_structure, random_structure)


def test_default_space_tops_out_at_1024():
    space = build_global_space(2, 10)
    assert space.dilations == (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
    assert len(space) == 11


def test_single_element_space():
    assert build_global_space(2, 0).dilations == (1,)


def test_base_three():
    assert build_global_space(3, 4).dilations == (1, 3, 9, 27, 81)


@pytest.mark.parametrize("k,T", [(1, 3), (0, 0), (2, -1)])
def test_invalid_space(k, T):
    with pytest.raises(ConfigError):
        build_global_space(k, T)


def test_space_overflow():
    build_global_space(2, 53)
    with pytest.raises(OverflowError):
        build_global_space(2, 54)
    with pytest.raises(OverflowError):
        build_global_space(10, 16)


@given(st.integers(2, 12), st.integers(0, 12))
def test_space_is_geometric(k, T):
    d = build_global_space(k, T).dilations
    assert len(d) == T + 1
    assert d[0] == 1
    assert all(b == a * k for a, b in zip(d, d[1:]))


def test_random_structure_single_value():
    s = random_structure(build_global_space(2, 0), [3], np.random.default_rng(0))
    assert s.stages == ((1, 1, 1),)


def test_random_structure_seeded():
    space = build_global_space(2, 10)
    a = random_structure(space, [10, 10, 10, 10], np.random.default_rng(7))
    b = random_structure(space, [10, 10, 10, 10], np.random.default_rng(7))
    assert a == b


def test_random_structure_membership():
    space = build_global_space(2, 10)
    s = random_structure(space, [10, 10, 10, 10], np.random.default_rng(3))
    allowed = {2 ** i for i in range(11)}
    assert s.shape == (10, 10, 10, 10)
    assert len(s.flat) == 40
    assert set(s.flat) <= allowed


def test_random_structure_draws_cover_space():
    space = build_global_space(2, 3)
    s = random_structure(space, [400], np.random.default_rng(1))
    counts = np.bincount([int(np.log2(d)) for d in s.flat])
    assert counts.tolist() and all(c > 60 for c in counts)


@pytest.mark.parametrize("shape", [[], [0], [3, 0]])
def test_random_structure_bad_shape(shape):
    with pytest.raises(ConfigError):
        random_structure(build_global_space(2, 2), shape, np.random.default_rng(0))


def test_encode_decode_example():
    s = DilationStructure(((1, 2), (4,)))
    assert encode_structure(s) == "1,2|4"
    assert decode_structure("1,2|4") == s
    assert str(s) == "1,2|4"


def test_decode_empty_stage():
    with pytest.raises(StructureParseError) as info:
        decode_structure("1,2|")
    assert info.value.position == 4


def test_decode_names_bad_token():
    with pytest.raises(StructureParseError) as info:
        decode_structure("1,x|4")
    assert info.value.token == "x"
    assert info.value.position == 2
    assert "'x'" in str(info.value)


@pytest.mark.parametrize("text", ["", "1,,2", "1, 2", "0", "1|-2", "+1", "1.5", "1|2|"])
def test_decode_rejects(text):
    with pytest.raises(StructureParseError):
        decode_structure(text)


def test_structure_validation():
    with pytest.raises(ConfigError):
        DilationStructure(((1, 0),))
    with pytest.raises(ConfigError):
        DilationStructure(())
    with pytest.raises(ConfigError):
        DilationStructure(((1, 2.5),))


def test_exponential_baseline():
    s = DilationStructure.exponential(4, 10)
    assert s.shape == (10, 10, 10, 10)
    assert s.stages[2] == tuple(2 ** i for i in range(10))


def test_from_flat_and_replace():
    s = DilationStructure.from_flat([1, 2, 3, 4, 5], (2, 3))
    assert s.stages == ((1, 2), (3, 4, 5))
    t = s.replace_flat(3, 9)
    assert t.stages == ((1, 2), (3, 9, 5))
    assert s.stages == ((1, 2), (3, 4, 5))


structures = st.lists(st.lists(st.integers(1, 10 ** 6), min_size=1, max_size=6), min_size=1, max_size=5)


@given(structures)
def test_round_trip(stages):
    s = DilationStructure(tuple(tuple(x) for x in stages))
    text = encode_structure(s)
    assert decode_structure(text) == s
    assert " " not in text
