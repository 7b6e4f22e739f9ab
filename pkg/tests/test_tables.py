import numpy as np
import pytest

from margbayes import (
    ContingencyTable,
    StratifiedTable,
    TableError,
    dumps_csv,
    dumps_json,
    lex_index,
    list_fixtures,
    load_fixture,
    loads_csv,
    loads_json,
    unrank,
    validate,
)

from oracles import lex_cells


def test_lex_index_first_cell():
    assert lex_index((1, 1), (6, 6)) == 0


def test_lex_index_last_fastest():
    assert lex_index((1, 2), (6, 6)) == 1


def test_lex_index_against_enumeration():
    # oracle: explicit enumeration of all 81 cells, last variable fastest
    dims = (3, 3, 3, 3)
    cells = lex_cells(dims)
    assert cells.index((1, 2, 1, 2)) == 10
    for flat, cell in enumerate(cells):
        assert lex_index(cell, dims) == flat
        assert unrank(flat, dims) == cell


def test_lex_index_out_of_range():
    with pytest.raises(TableError):
        lex_index((0, 1), (6, 6))
    with pytest.raises(TableError):
        lex_index((1, 7), (6, 6))


@pytest.mark.parametrize("name", ["father_son", "alzheimer", "skin_trial"])
def test_lex_round_trip_on_fixture_shapes(name):
    table = load_fixture(name)
    for flat in range(table.r):
        assert lex_index(unrank(flat, table.dims), table.dims) == flat


def test_father_son_fixture():
    t = load_fixture("father_son")
    assert t.dims == (6, 6) and t.s == 1
    # printed Table 2 cells sum to 3498 (the caption's 3,488 is off by 10)
    assert t.n == 3498


def test_alzheimer_fixture():
    t = load_fixture("alzheimer")
    assert t.dims == (5, 4) and t.s == 2
    assert [x.n for x in t.tables] == [177, 336]
    assert t.n == 513


def test_skin_trial_fixture():
    t = load_fixture("skin_trial")
    assert t.dims == (3, 3, 3, 3) and t.s == 2
    assert t.n == 72
    d = validate(t)
    assert (d.zero_cells, d.total_cells) == (128, 162)
    assert d.sparsity == pytest.approx(128 / 162)


def test_validate_father_son_no_zeros():
    d = validate(load_fixture("father_son"))
    assert d.zero_cells == 0
    assert not d.empty


def test_validate_flags_empty_table():
    t = StratifiedTable(("only",), (ContingencyTable((2, 2), np.zeros(4)),))
    d = validate(t)
    assert d.empty and d.n == 0
    assert any("n = 0" in m for m in d.messages)


def test_negative_count_rejected():
    with pytest.raises(TableError, match="negative"):
        ContingencyTable((2, 2), [1, -1, 0, 0])


def test_ragged_strata_rejected():
    a = ContingencyTable((2, 2), [1, 2, 3, 4])
    b = ContingencyTable((2, 3), [1, 2, 3, 4, 5, 6])
    with pytest.raises(TableError, match="dims"):
        StratifiedTable(("x", "y"), (a, b))


def test_csv_round_trip_bit_exact():
    for name in ("father_son", "alzheimer", "skin_trial"):
        t = load_fixture(name)
        text = dumps_csv(t)
        assert dumps_csv(loads_csv(text)) == text


def test_json_round_trip_bit_exact():
    for name in ("father_son", "alzheimer", "skin_trial"):
        t = load_fixture(name)
        text = dumps_json(t)
        t2 = loads_json(text)
        assert dumps_json(t2) == text
        assert t2.dims == t.dims and t2.strata == t.strata
        assert all(np.array_equal(x.counts, y.counts) for x, y in zip(t.tables, t2.tables))


def test_csv_error_lists_offending_rows():
    bad = "stratum,a1,a2,count\nall,1,1,3\nall,1,oops,2\nall,2,1,-4\n"
    with pytest.raises(TableError) as err:
        loads_csv(bad)
    msg = str(err.value)
    assert "row 3" in msg and "row 4" in msg


def test_csv_duplicate_cell_rejected():
    bad = "stratum,a1,a2,count\nall,1,1,3\nall,1,1,2\n"
    with pytest.raises(TableError, match="duplicate"):
        loads_csv(bad)


def test_fixture_listing():
    rows = {r["name"]: r for r in list_fixtures()}
    assert rows["father_son"]["dims"] == [6, 6]
    assert rows["alzheimer"]["strata"] == 2
    assert rows["skin_trial"]["dims"] == [3, 3, 3, 3]
