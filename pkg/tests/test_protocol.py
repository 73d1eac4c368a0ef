import itertools

import pytest
from hypothesis import given, strategies as st

from vdd.errors import ProtocolError
from vdd.protocol import GmdaTask, build_task, shared_and_private


def test_union_and_unknown_index():
    task = build_task([{0, 1, 2}, {1, 2, 3}])
    assert task.label_space.known_classes == (0, 1, 2, 3)
    assert task.unknown_index == 4
    assert task.num_sources == 2
    assert task.num_domains == 3
    assert task.target_index == 2


def test_identical_sets_are_remapped():
    task = build_task([{5, 9}, {5, 9}])
    assert task.label_space.known_classes == (0, 1)
    assert task.unknown_index == 2
    assert task.to_raw(0) == 5 and task.to_raw(1) == 9


def test_disjoint_sources_have_no_shared_classes():
    task = build_task([{0, 1}, {2, 3}, {4, 5}])
    assert task.num_known == 6
    # brute force over every ordered pair of sources
    for i, j in itertools.permutations(range(3), 2):
        shared, private = shared_and_private(task, i, j)
        assert shared == frozenset()
        assert private == task.source_label_sets[i]


def test_shared_and_private_examples():
    task = build_task([{0, 1, 2}, {1, 2, 3}])
    assert shared_and_private(task, 0, 1) == ({1, 2}, {0})
    same = build_task([{0, 1}, {0, 1}])
    assert shared_and_private(same, 0, 1) == ({0, 1}, set())


@pytest.mark.parametrize("bad", [[{0, 1}], [{0, 1}, set()], []])
def test_invalid_source_sets(bad):
    with pytest.raises(ProtocolError):
        build_task(bad)


def test_duplicate_domain_names():
    with pytest.raises(ProtocolError, match="duplicate"):
        build_task([{0}, {1}], domain_names=["a", "a", "t"])


def test_unknown_class_in_source_rejected():
    with pytest.raises(ProtocolError):
        build_task([{0, 1}, {1, 2}], unknown_classes=[2, 3])


def test_shared_and_private_index_errors():
    task = build_task([{0, 1}, {1, 2}])
    with pytest.raises(ProtocolError):
        shared_and_private(task, 0, 2)
    with pytest.raises(ProtocolError):
        shared_and_private(task, 1, 1)


def test_unknown_raw_classes_collapse():
    task = build_task([{0, 1}, {1, 2}], unknown_classes=[7, 8])
    assert task.to_index(7) == task.to_index(8) == task.unknown_index == 3
    with pytest.raises(ProtocolError):
        task.to_index(42)


def test_yaml_round_trip():
    task = build_task([{3, 10}, {10, 12}], unknown_classes=[20], domain_names=["a", "b", "t"], seed=4)
    again = GmdaTask.load(task.dump())
    assert again.source_label_sets == task.source_label_sets
    assert again.index_to_raw == task.index_to_raw
    assert again.unknown_raw_classes == (20,)
    assert again.domain_names == ("a", "b", "t")


label_sets = st.lists(st.frozensets(st.integers(0, 40), min_size=1, max_size=8), min_size=2, max_size=5)


@given(label_sets)
def test_union_equals_known_classes(sets):
    task = build_task(sets)
    raw_union = set().union(*sets)
    assert {task.to_raw(c) for c in task.label_space.known_classes} == raw_union
    assert set().union(*task.source_label_sets) == set(task.label_space.known_classes)
    assert task.unknown_index == len(raw_union)


@given(label_sets)
def test_remapping_is_a_bijection(sets):
    task = build_task(sets)
    for raw in set().union(*sets):
        assert task.to_raw(task.to_index(raw)) == raw
    assert sorted(task.index_to_raw) == list(range(task.num_known))


@given(label_sets, st.data())
def test_shared_is_symmetric(sets, data):
    task = build_task(sets)
    i, j = data.draw(st.lists(st.integers(0, len(sets) - 1), min_size=2, max_size=2, unique=True))
    assert shared_and_private(task, i, j)[0] == shared_and_private(task, j, i)[0]
