import numpy as np
import pytest

from histmatch.runtable import RunTable, concat, timestamp
from histmatch.space import ParameterDef, ParameterSpace


@pytest.fixture
def space():
    return ParameterSpace([ParameterDef("a", 0.0, 3.0), ParameterDef("b", -7.0, 11.0)])


def make(space, rng, n=5, wave=1):
    t = RunTable(space, 3)
    U = rng.uniform(-1, 1, (n, 2))
    Y = rng.normal(size=(n, 3)) * 1e3
    ok = np.ones(n, bool)
    ok[1] = False
    t.append([f"w{wave}-{i}" for i in range(n)], wave, "train", U, Y, ok, 42, {1: "exit_status: exit status 1, bad"})
    return t


def test_csv_round_trip_bit_exact(space, rng):
    t = make(space, rng)
    back = RunTable.from_csv(t.to_csv(), space, 3)
    assert back.run_id == t.run_id and back.status == t.status and back.failure == t.failure
    assert np.array_equal(back.unit, t.unit)
    ok = t.ok
    assert np.array_equal(back.outputs[ok], t.outputs[ok])
    assert np.isnan(back.outputs[~ok]).all()
    assert back.to_csv() == t.to_csv()


def test_header_fixed_order(space, rng):
    header = make(space, rng).to_csv().splitlines()[0]
    assert header == "run_id,wave,role,status,seed,timestamp,u_a,u_b,a,b,y0,y1,y2,failure"


def test_duplicate_ids_rejected(space, rng):
    t = make(space, rng)
    with pytest.raises(ValueError, match="duplicate"):
        t.append(["w1-0"], 1, "train", np.zeros((1, 2)), np.zeros((1, 3)), [True], 0)


def test_ok_rows_need_outputs(space):
    with pytest.raises(ValueError):
        RunTable(space, 1, ["x"], [1], ["train"], ["ok"], [0], [""], [""], np.zeros((1, 2)), [[np.nan]])


def test_pending_then_record(space, rng):
    t = RunTable(space, 3)
    t.add_pending(["p0", "p1", "p2"], 2, "diagnostic", rng.uniform(-1, 1, (3, 2)), 9)
    assert t.pending.all()
    t.record([0, 2], np.ones((2, 3)), [True, False], {1: "timeout"})
    assert t.status == ["ok", "pending", "failed"]
    assert t.failure[2] == "timeout"
    back = RunTable.from_csv(t.to_csv(), space, 3)
    assert back.status == t.status


def test_where_and_concat(space, rng):
    a = make(space, rng, 4, wave=1)
    b = make(space, rng, 3, wave=2)
    both = concat([a, b])
    assert len(both) == 7
    assert len(both.where(wave=2)) == 3
    assert len(both.where(ok_only=True)) == 5


def test_timestamp_honours_source_date_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert timestamp() == "1970-01-01T00:00:00Z"


def test_header_mismatch(space, rng):
    other = ParameterSpace([ParameterDef("a", 0.0, 3.0), ParameterDef("c", 0.0, 1.0)])
    with pytest.raises(ValueError, match="header"):
        RunTable.from_csv(make(space, rng).to_csv(), other, 3)
