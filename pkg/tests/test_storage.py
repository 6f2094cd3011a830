import threading

import pytest
from hypothesis import given, strategies as st

from flowline.errors import (
    AlreadyRegistered,
    DuplicateWrite,
    EpochRegression,
    MissingCell,
    NotOwnedRow,
)
from flowline.storage import PartitionMap, StorageUnit, group_coordinates


class RecordingLink:
    """Notification sink that logs every delivery it receives."""

    def __init__(self, fail_times=0):
        self.calls = []
        self.fail_times = fail_times

    def apply_notification(self, unit_id, epoch, groups):
        if self.fail_times > 0:
            self.fail_times -= 1
            raise ConnectionError("injected")
        self.calls.append((unit_id, epoch, groups))

    def coordinates(self):
        out = []
        for _, _, groups in self.calls:
            for rows, cols in groups:
                out.extend((r, c) for r in rows for c in cols)
        return out


def make_unit(unit_id=0, epoch=1, num_units=2, total_rows=8):
    part = PartitionMap(num_units)
    return StorageUnit(unit_id, epoch, part.owned_rows(unit_id, total_rows))


def test_put_single_cell_notifies_registered_controller():
    unit = make_unit()
    link = RecordingLink()
    unit.register_controller("ctrl-a", link)
    ack = unit.put([(0, "prompt", b"hi")])
    assert ack.count == 1
    assert link.coordinates() == [(0, "prompt")]


def test_empty_put_is_a_noop():
    unit = make_unit()
    link = RecordingLink()
    unit.register_controller("ctrl-a", link)
    assert unit.put([]).count == 0
    assert link.calls == []


def test_put_outside_owned_rows_rejected():
    part = PartitionMap(2)
    unit = StorageUnit(0, 1, part.owned_rows(0, 8))
    # unit 0 owns the even rows of 0..7 under modulo assignment
    with pytest.raises(NotOwnedRow):
        unit.put([(7, "response", b"x")])
    assert unit.cell_count() == 0


def test_rejected_put_stores_nothing():
    unit = make_unit()
    with pytest.raises(NotOwnedRow):
        unit.put([(0, "prompt", b"ok"), (7, "prompt", b"bad")])
    with pytest.raises(MissingCell):
        unit.get([0], ["prompt"])


def test_write_once_per_epoch():
    unit = make_unit()
    unit.put([(0, "prompt", b"first")])
    with pytest.raises(DuplicateWrite):
        unit.put([(0, "prompt", b"second")])
    assert unit.get([0], ["prompt"]) == [(0, "prompt", b"first")]
    # duplicates inside one put are also rejected
    with pytest.raises(DuplicateWrite):
        unit.put([(2, "prompt", b"a"), (2, "prompt", b"b")])


def test_get_order_rows_outer_columns_inner():
    unit = make_unit(num_units=1)
    unit.put([(0, "prompt", b"p0"), (1, "prompt", b"p1")])
    unit.put([(0, "response", b"r0"), (1, "response", b"r1")])
    cells = unit.get([0, 1], ["prompt", "response"])
    assert cells == [
        (0, "prompt", b"p0"),
        (0, "response", b"r0"),
        (1, "prompt", b"p1"),
        (1, "response", b"r1"),
    ]


def test_get_missing_cell_errors():
    unit = make_unit()
    with pytest.raises(MissingCell):
        unit.get([2], ["response"])


def test_get_is_deterministic():
    unit = make_unit(num_units=1)
    unit.put([(0, "prompt", b"p0"), (1, "prompt", b"p1")])
    first = unit.get([1, 0], ["prompt"])
    assert first == unit.get([1, 0], ["prompt"])


def test_register_twice_rejected():
    unit = make_unit()
    unit.register_controller("ctrl-a", RecordingLink())
    with pytest.raises(AlreadyRegistered):
        unit.register_controller("ctrl-a", RecordingLink())


def test_broadcast_reaches_all_controllers_identically():
    unit = make_unit()
    links = [RecordingLink(), RecordingLink()]
    unit.register_controller("ctrl-a", links[0])
    unit.register_controller("ctrl-b", links[1])
    unit.put([(0, "prompt", b"x"), (2, "prompt", b"y")])
    assert links[0].calls == links[1].calls
    assert sorted(links[0].coordinates()) == [(0, "prompt"), (2, "prompt")]


def test_late_registration_gets_snapshot():
    unit = make_unit()
    unit.put([(0, "prompt", b"x")])
    unit.put([(2, "prompt", b"y"), (2, "response", b"z")])
    snapshot = unit.register_controller("late", RecordingLink())
    coords = sorted(
        (r, c) for rows, cols in snapshot for r in rows for c in cols
    )
    assert coords == [(0, "prompt"), (2, "prompt"), (2, "response")]


def test_notification_completeness_multiset():
    unit = make_unit(num_units=1, total_rows=16)
    link = RecordingLink()
    unit.register_controller("ctrl-a", link)
    written = []
    unit.put([(r, "prompt", b"p") for r in range(16)])
    written += [(r, "prompt") for r in range(16)]
    unit.put([(r, "response", b"r") for r in range(0, 16, 2)])
    written += [(r, "response") for r in range(0, 16, 2)]
    assert sorted(link.coordinates()) == sorted(written)
    assert len(link.calls) == 2


def test_notify_retry_is_at_least_once():
    unit = make_unit()
    link = RecordingLink(fail_times=1)
    unit.register_controller("flaky", link)
    unit.put([(0, "prompt", b"x")])
    assert link.coordinates() == [(0, "prompt")]


def test_mixed_put_groups_by_column_set():
    groups = group_coordinates([(0, "prompt"), (1, "prompt"), (1, "response")])
    cells = sorted((r, c) for rows, cols in groups for r in rows for c in cols)
    assert cells == [(0, "prompt"), (1, "prompt"), (1, "response")]


def test_reset_epoch_clears_cells_and_restarts_write_once():
    unit = make_unit()
    unit.put([(0, "prompt", b"x")])
    unit.reset_epoch(2, {0, 2, 4, 6})
    assert unit.cell_count() == 0
    unit.put([(0, "prompt", b"fresh")])
    assert unit.get([0], ["prompt"]) == [(0, "prompt", b"fresh")]


def test_reset_epoch_must_advance():
    unit = make_unit(epoch=3)
    with pytest.raises(EpochRegression):
        unit.reset_epoch(3, set())
    with pytest.raises(EpochRegression):
        unit.reset_epoch(2, set())


@given(
    total_rows=st.integers(min_value=0, max_value=64),
    num_units=st.integers(min_value=1, max_value=9),
)
def test_partition_totality(total_rows, num_units):
    part = PartitionMap(num_units)
    shards = [part.owned_rows(u, total_rows) for u in range(num_units)]
    union = set().union(*shards) if shards else set()
    assert union == set(range(total_rows))
    assert sum(len(s) for s in shards) == total_rows
    for row in range(total_rows):
        assert row in shards[part.unit_for(row)]


def test_concurrent_writers_single_winner_per_cell():
    unit = make_unit(num_units=1, total_rows=4)
    outcomes = []

    def writer(tag):
        try:
            unit.put([(0, "prompt", tag)])
            outcomes.append(("ok", tag))
        except DuplicateWrite:
            outcomes.append(("dup", tag))

    threads = [
        threading.Thread(target=writer, args=(f"w{i}".encode(),)) for i in range(8)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wins = [tag for kind, tag in outcomes if kind == "ok"]
    assert len(wins) == 1
    assert unit.get([0], ["prompt"]) == [(0, "prompt", wins[0])]
