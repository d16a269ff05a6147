import csv
import io
import json

import numpy as np
import pytest

from freqpf.caseio import (
    GEN_COLUMNS,
    MalformedInputError,
    SchemaViolationError,
    UnsupportedRecordError,
    case_from_dict,
    case_to_dict,
    dump_case,
    import_matpower,
    parse_case,
    parse_events,
    results_to_dict,
    write_generator_csv,
    write_results,
)
from freqpf.network import ValidationError
from freqpf.solver import assemble_jacobian, flat_start
from freqpf.staged import GeneratorOutage, LoadOverride, LoadScale, ReplaceCase, run_timeline


def twobus_doc(twobus_path):
    with open(twobus_path) as fh:
        return json.load(fh)


def test_parse_twobus(twobus_path):
    case = parse_case(twobus_path)
    assert (len(case.buses), len(case.branches), len(case.generators)) == (2, 1, 1)
    assert case.per_unit
    assert case.loads[0].p0 == pytest.approx(1.5)


def test_parse_from_stream(twobus_path):
    with open(twobus_path) as fh:
        assert parse_case(fh) == parse_case(twobus_path)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    with pytest.raises(MalformedInputError):
        parse_case(p)


def test_malformed_json_reports_position():
    with pytest.raises(MalformedInputError, match=r"line 2, column \d+"):
        parse_case(io.StringIO('{"version": 1,\n "buses": [,]}'))


def test_duplicate_bus_id(twobus_path):
    doc = twobus_doc(twobus_path)
    doc["buses"][1]["id"] = 1
    with pytest.raises(SchemaViolationError) as info:
        case_from_dict(doc)
    assert info.value.pointer == "/buses/1/id"


def test_unknown_key_is_rejected(twobus_path):
    doc = twobus_doc(twobus_path)
    doc["generators"][0]["inertia"] = 5.0
    with pytest.raises(SchemaViolationError) as info:
        case_from_dict(doc)
    assert info.value.pointer == "/generators/0"


def test_wrong_type_pointer(twobus_path):
    doc = twobus_doc(twobus_path)
    doc["loads"][0]["p0"] = "lots"
    with pytest.raises(SchemaViolationError) as info:
        case_from_dict(doc)
    assert info.value.pointer == "/loads/0/p0"


def test_semantic_problems_surface(tmp_path, twobus_path):
    doc = twobus_doc(twobus_path)
    doc["branches"][0]["to_bus"] = 99
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ValidationError, match="dangling reference to bus 99"):
        parse_case(p)


def test_round_trip(tmp_path, twobus_path):
    case = parse_case(twobus_path)
    out = tmp_path / "again.json"
    dump_case(case, out)
    assert parse_case(out) == case
    # the dump is in physical units
    assert json.loads(out.read_text())["loads"][0]["p0"] == pytest.approx(150.0)


def test_case_to_dict_is_json_serialisable(twobus):
    json.dumps(case_to_dict(twobus))


def test_import_case9(case9_path):
    case = import_matpower(case9_path)
    assert len(case.buses) == 9
    assert len(case.generators) == 3
    assert len(case.branches) == 9
    assert case.slack_bus.id == 1
    assert all(g.droop_gain == 0.0 for g in case.generators)


def test_import_rejects_phase_shifter(tmp_path, case9_path):
    text = open(case9_path).read()
    text = text.replace("1	4	0	0.0576	0	250	250	250	0	0", "1	4	0	0.0576	0	250	250	250	0	5")
    p = tmp_path / "shifted.m"
    p.write_text(text)
    with pytest.raises(UnsupportedRecordError, match="phase shift"):
        import_matpower(p)


def test_import_rejects_unknown_tables(tmp_path, case9_path):
    text = open(case9_path).read() + "\nmpc.dcline = [\n 1 2 1 10 10;\n];\n"
    p = tmp_path / "dc.m"
    p.write_text(text)
    with pytest.raises(UnsupportedRecordError, match="dcline"):
        import_matpower(p)


def test_sidecar_adds_frequency_coupling(tmp_path, case9_path):
    side = tmp_path / "freq.json"
    side.write_text(json.dumps({
        "defaults": {"generator": {"droop_gain": 50.0}},
        "generators": [{"id": 2, "kappa": 1.0, "agc": True}],
        "areas": [{"id": 1, "beta": 20.0}],
    }))
    case = import_matpower(case9_path, side)
    assert case.generator(1).droop_gain == pytest.approx(0.5)
    assert case.generator(2).agc
    st = flat_start(case)
    jac = assemble_jacobian(case, st).tocsc()
    assert np.any(jac[:, st.index.df].toarray() != 0.0)


def test_sidecar_rejects_unknown_field(tmp_path, case9_path):
    side = tmp_path / "freq.json"
    side.write_text(json.dumps({"generators": [{"id": 2, "bus_id": 5}]}))
    with pytest.raises(SchemaViolationError):
        import_matpower(case9_path, side)


def test_parse_events(tmp_path, twobus_path):
    other = tmp_path / "other.json"
    other.write_text(open(twobus_path).read())
    script = tmp_path / "events.json"
    script.write_text(json.dumps({"version": 1, "events": [
        {"type": "generator_outage", "id": 3},
        {"type": "load_scale", "factor": 1.1},
        {"type": "load_override", "id": 1, "p0": 12.5},
        {"type": "replace_case", "path": "other.json"},
    ]}))
    events = parse_events(script)
    assert events[:3] == [GeneratorOutage(3), LoadScale(1.1), LoadOverride(1, 12.5, None)]
    assert isinstance(events[3], ReplaceCase)
    assert events[3].case.name == "twobus"


def test_bad_event_type(tmp_path):
    script = tmp_path / "events.json"
    script.write_text(json.dumps({"version": 1, "events": [{"type": "meteor", "id": 1}]}))
    with pytest.raises(SchemaViolationError) as info:
        parse_events(script)
    assert info.value.pointer == "/events/0"


@pytest.fixture
def timeline(twobus):
    return run_timeline(twobus, [LoadScale(1.5)])


def test_results_document(timeline):
    doc = results_to_dict(timeline, timestamp="T")
    assert [s["time"] for s in doc["stages"]] == ["t1", "t2", "t3"]
    t2 = doc["stages"][1]
    assert t2["df_hz"] == pytest.approx(-0.75, abs=1e-8)
    assert t2["ace_by_area_mw"]["1"] == pytest.approx(75.0, abs=1e-5)
    assert t2["generators"][0]["dp_primary"] == pytest.approx(75.0, abs=1e-5)
    slack = doc["stages"][0]["buses"][0]
    assert slack["id"] == 1
    assert slack["v_mag"] == pytest.approx(1.0, abs=1e-12)
    assert slack["v_angle_deg"] == pytest.approx(0.0, abs=1e-12)


def test_results_are_deterministic(tmp_path, twobus):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_results(run_timeline(twobus, [LoadScale(1.5)]), a, timestamp="fixed")
    write_results(run_timeline(twobus, [LoadScale(1.5)]), b, timestamp="fixed")
    assert a.read_bytes() == b.read_bytes()


def test_results_round_trip_floats_exactly(tmp_path, timeline):
    p = tmp_path / "r.json"
    write_results(timeline, p, timestamp="T")
    assert json.loads(p.read_text())["stages"][1]["df_hz"] == timeline[1].df


def test_generator_csv(tmp_path, timeline):
    p = tmp_path / "g.csv"
    write_generator_csv(timeline, p)
    rows = list(csv.reader(open(p)))
    assert rows[0] == GEN_COLUMNS
    assert len(rows) == 1 + 3
    assert [r[0] for r in rows[1:]] == ["t1", "t2", "t3"]
