import numpy as np
import pytest

from multigraph_pf.dss import (
    BusRef,
    CircuitError,
    DSSSyntaxError,
    line_impedance_ohm,
    parse_file,
    parse_path,
    to_dss,
    tokenize,
)

from conftest import FIXTURES

HEADER = """New Circuit.t basekv=4.16 bus1=B1
New LineCode.c1 nphases=3 units=km rmatrix=(0.3 | 0.1 0.3 | 0.1 0.1 0.3) xmatrix=(0.8 | 0.3 0.8 | 0.3 0.3 0.8)
New Line.LA Bus1=B1.1.2.3 Bus2=B2.1.2.3 LineCode=c1 Length=1 units=km
"""


def kinds_values(text):
    return [(t.kind, t.value) for t in tokenize(text) if t.kind != "newline"]


def test_tokenize_line_with_comment():
    assert kinds_values("New Line.L1 Bus1=650.1 ! feeder") == [
        ("keyword", "new"), ("ident", "Line"), (".", "."), ("ident", "L1"),
        ("ident", "Bus1"), ("=", "="), ("number", "650"), (".", "."), ("number", "1"),
    ]


def test_tokenize_continuation_joins_previous_statement():
    toks = kinds_values("New Line.L1 Bus1=a\n~ Length=2000")
    assert ("newline", "\n") not in toks
    assert toks[-3:] == [("ident", "Length"), ("=", "="), ("number", "2000")]


def test_tokenize_matrix_literal():
    toks = kinds_values("rmatrix=(0.3465 | 0.1560 0.3375)")
    assert [v for _, v in toks] == ["rmatrix", "=", "(", "0.3465", "|", "0.1560", "0.3375", ")"]


def test_tokenize_unterminated_paren_reports_line():
    with pytest.raises(DSSSyntaxError) as err:
        tokenize("New Circuit.x\nNew LineCode.c rmatrix=(1 2\n")
    assert err.value.line == 2


def test_slash_comment_and_case_insensitive_keyword():
    toks = kinds_values("NEW Circuit.x // trailing")
    assert toks[0] == ("keyword", "new")
    assert all(v != "trailing" for _, v in toks)


def test_three_phase_line_record():
    spec = parse_file(HEADER)
    assert len(spec.lines) == 1
    line = spec.lines[0]
    assert line.bus1 == BusRef("b1", (1, 2, 3)) and line.bus2 == BusRef("b2", (1, 2, 3))
    assert line.length == 1 and line.length_unit == "km"


def test_single_phase_load_suffix():
    spec = parse_file(HEADER + "New Load.LD Bus1=B2.2 phases=1 kW=100 kvar=50\n")
    ld = spec.loads[0]
    assert ld.p_kw == (0.0, 100.0, 0.0)
    assert ld.q_kvar == (0.0, 50.0, 0.0)


def test_load_without_suffix_spreads_over_three_phases():
    spec = parse_file(HEADER + "New Load.LD Bus1=B2 kW=300 kvar=30\n")
    assert spec.loads[0].p_kw == (100.0, 100.0, 100.0)


def test_dangling_bus_is_an_error():
    with pytest.raises(CircuitError, match="dangling bus"):
        parse_file(HEADER + "New Load.X Bus1=B9.1 phases=1 kW=1\n")


def test_duplicate_name_is_an_error():
    with pytest.raises(CircuitError, match="duplicate"):
        parse_file(HEADER + "New Line.LA Bus1=B1 Bus2=B3 LineCode=c1 Length=1\n")


def test_dangling_linecode_is_an_error():
    with pytest.raises(CircuitError, match="linecode"):
        parse_file(HEADER + "New Line.LB Bus1=B2 Bus2=B3 LineCode=nope Length=1\n")


def test_missing_circuit_is_an_error():
    with pytest.raises(CircuitError, match="Circuit"):
        parse_file(HEADER.split("\n", 1)[1])


def test_unknown_class_skipped_with_warning():
    spec = parse_file(HEADER + "New Monitor.m1 element=Line.LA\n")
    assert any("monitor" in w for w in spec.warnings)


def test_phase_suffix_law():
    spec = parse_path(FIXTURES / "ieee13.dss")
    refs = [ln.bus1 for ln in spec.lines] + [ld.bus for ld in spec.loads]
    for ref in refs:
        assert 1 <= len(ref.phases) <= 3
        assert len(set(ref.phases)) == len(ref.phases)


def test_rpn_and_wdg_transformer():
    spec = parse_path(FIXTURES / "ieee13.dss")
    sub = next(t for t in spec.transformers if t.name == "sub")
    assert sub.x_pu == pytest.approx(8e-5)  # (8 1000 /) percent
    assert sub.r_pu == pytest.approx(0.00001)
    assert (sub.kv1, sub.kv2, sub.kva) == (115.0, 4.16, 5000.0)


def test_regcontrol_marks_regulators():
    spec = parse_path(FIXTURES / "ieee13.dss")
    flags = {t.name: t.regulated for t in spec.transformers}
    assert flags == {"sub": False, "reg1": True, "reg2": True, "reg3": True, "xfm1": False}


def test_regcontrol_unknown_transformer():
    with pytest.raises(CircuitError, match="unknown transformer"):
        parse_file(HEADER + "New RegControl.r transformer=ghost winding=2\n")


def test_sequence_impedance_linecode():
    text = HEADER + "New LineCode.seq nphases=3 r1=0.2 x1=0.4 r0=0.5 x0=1.1 units=km\n" \
                    "New Line.LS Bus1=B2 Bus2=B3 LineCode=seq Length=2 units=km\n"
    spec = parse_file(text)
    z = line_impedance_ohm(spec, spec.lines[1])
    zs = (2 * (0.2 + 0.4j) + (0.5 + 1.1j)) / 3 * 2
    zm = ((0.5 + 1.1j) - (0.2 + 0.4j)) / 3 * 2
    assert np.allclose(np.diag(z), zs)
    assert np.isclose(z[0, 1], zm)


def test_unit_conversion_feet_vs_miles():
    spec = parse_path(FIXTURES / "ieee4.dss")
    z = line_impedance_ohm(spec, spec.lines[0])
    assert z[0, 0].real == pytest.approx(0.4576 * 2000 / 5280)


@pytest.mark.parametrize("name", ["ieee4.dss", "ieee13.dss"])
def test_round_trip(name):
    spec = parse_path(FIXTURES / name)
    again = parse_file(to_dss(spec))
    assert again == spec


@pytest.mark.parametrize("name", ["ieee4.dss", "ieee13.dss"])
def test_parse_is_deterministic(name):
    text = (FIXTURES / name).read_text()
    assert parse_file(text) == parse_file(text)


def test_delta_load_split_with_warning():
    spec = parse_file(HEADER + "New Load.D Bus1=B2.1.2 phases=1 conn=delta kW=100 kvar=40\n")
    assert spec.loads[0].p_kw == (50.0, 50.0, 0.0)
    assert any("delta" in w for w in spec.warnings)


def test_fixture_counts():
    spec = parse_path(FIXTURES / "ieee13.dss")
    assert len(spec.transformers) == 5
    assert len(spec.loads) == 15
    assert len(spec.capacitors) == 2
