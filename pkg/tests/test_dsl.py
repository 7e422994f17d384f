import pytest

from mavguard.config import parse_defines
from mavguard.dsl import SpecError, format_spec, load_spec, parse_spec, validate_spec
from mavguard.messages import CommandLong, ParamSet
from mavguard.utils import SPECS_DIR

DEFAULT_SPEC = SPECS_DIR / "default.spec"


@pytest.fixture
def default_spec():
    return load_spec(str(DEFAULT_SPEC))


def diagnostics_of(text: str):
    with pytest.raises(SpecError) as info:
        parse_spec(text)
    return info.value.diagnostics


def test_default_spec_is_valid(default_spec):
    assert validate_spec(default_spec) == []
    assert [r.name for r in default_spec.rules] == [
        "pitchrate",
        "pitch_gain",
        "pitchrate_gain",
        "pitchrate_ff",
        "parachute",
    ]
    assert [it.name for it in default_spec.iterations] == ["mission_upload"]
    assert default_spec.const_values["m1"] == 10.0
    assert default_spec.state_decl("MC_PITCHRATE_MAX").max == 1800.0


def test_load_spec_finds_packaged_spec_by_name():
    assert load_spec("default.spec").rules


def test_defines_override_constants():
    spec = load_spec(str(DEFAULT_SPEC), {"m1": 2.0, "extra": 1.5})
    assert spec.const_values["m1"] == 2.0
    assert spec.const_values["extra"] == 1.5


def test_pattern_match_binds_fields(default_spec):
    rule = default_spec.rules_for("COMMAND_LONG")[0]
    assert rule.trigger.match(CommandLong(command=208, param1=2)) == {"action": 2.0}
    assert rule.trigger.match(CommandLong(command=400, param1=1)) is None
    pitchrate = default_spec.rules[0]
    assert pitchrate.trigger.match(ParamSet(param_id="MC_PITCHRATE_MAX", param_value=200)) == {"n": 200.0}
    assert pitchrate.trigger.match(ParamSet(param_id="MC_PITCH_P", param_value=200)) is None


def test_parachute_rule_branches(default_spec):
    rule = default_spec.rules[-1]
    assert len(rule.branches) == 3
    release = rule.branches[2]
    assert [r.reason for r in release.requirements] == [
        "not armed",
        "forbidden flight mode",
        "climbing",
        "below CHUTE_ALT_MIN",
    ]
    assert rule.uses_telemetry
    assert not default_spec.rules[0].uses_telemetry


def test_iteration_fields(default_spec):
    it = default_spec.iterations[0]
    assert it.count_field == "count"
    assert it.index_field == "seq"
    assert it.item_requirements[0].reason == "mission type mismatch"


def test_print_then_parse_is_identity(default_spec):
    text = format_spec(default_spec)
    assert parse_spec(text) == default_spec
    assert format_spec(parse_spec(text)) == text


def test_print_keeps_otherwise_branches():
    spec = parse_spec(
        "rule mode_guard: on COMMAND_LONG(command=176, param2->m)\n"
        "    when m == mode.FLIP:\n"
        "        require false\n"
        "    otherwise:\n"
        "        require state.armed or m == 0\n"
    )
    text = format_spec(spec)
    assert "    otherwise:\n" in text
    assert parse_spec(text) == spec


def test_comments_and_blank_lines_are_ignored():
    spec = parse_spec('# header\n\nconst a = 1  # trailing\nrule r: on STATUSTEXT(text="a#b")\n    require a > 0\n')
    assert spec.rules[0].trigger.constraints == (("text", "a#b"),)


def test_unresolved_state_reference_has_line_and_column():
    text = "param P default 1\nrule r: on PARAM_SET(param_value->v)\n    require v <= state.Q\n"
    (diagnostic,) = diagnostics_of(text)
    assert diagnostic.line == 3
    assert diagnostic.column == 18
    assert "state.Q" in diagnostic.message


def test_syntax_error_is_reported_with_line():
    text = "const a = 1\nrule r: on PARAM_SET(param_value->v)\n    require v <= \n"
    diagnostics = diagnostics_of(text)
    assert diagnostics[0].line == 3
    assert "syntax error" in diagnostics[0].message


def test_every_problem_is_reported():
    text = (
        "param P default 5 min 0 max 1\n"
        "rule r: on PARAM_SET(bogus->v)\n"
        "    require v + 1\n"
        "rule r: on NOT_A_MESSAGE(x->y)\n"
        "iter it: on MISSION_COUNT(count->N) expect MISSION_ITEM_INT(x->i)\n"
        "    require iter.nope == 0\n"
    )
    messages = [d.message for d in diagnostics_of(text)]
    assert any("above max" in m for m in messages)
    assert any("unknown field bogus" in m for m in messages)
    assert any("duplicate rule name 'r'" in m for m in messages)
    assert any("unknown message NOT_A_MESSAGE" in m for m in messages)
    assert any("index binder must name a 16-bit unsigned field" in m for m in messages)
    assert any("unknown iteration field iter.nope" in m for m in messages)


def test_requirement_must_be_boolean():
    (diagnostic,) = diagnostics_of("rule r: on PARAM_SET(param_value->v)\n    require v * 2\n")
    assert "requirement must be boolean" in diagnostic.message


def test_iter_reference_outside_iteration():
    (diagnostic,) = diagnostics_of("rule r: on MISSION_ITEM_INT(seq->i)\n    require i < iter.count\n")
    assert "outside an iteration" in diagnostic.message


def test_constraint_type_is_checked():
    (diagnostic,) = diagnostics_of('rule r: on PARAM_SET(param_id=3)\n')
    assert "pattern gives num" in diagnostic.message


def test_require_before_when_is_rejected():
    diagnostics = diagnostics_of(
        "rule r: on COMMAND_LONG(param1->a)\n    require a > 0\n    when a == 1:\n        require true\n"
    )
    assert diagnostics[0].line == 3


def test_unknown_declaration():
    (diagnostic,) = diagnostics_of("limit x = 3\n")
    assert diagnostic.line == 1
    assert "unknown declaration 'limit'" in diagnostic.message


def test_negative_constraint_literal():
    spec = parse_spec("rule r: on GLOBAL_POSITION_INT(vz=-5)\n")
    assert spec.rules[0].trigger.constraints == (("vz", -5.0),)


def test_non_finite_numbers_are_rejected():
    (diagnostic,) = diagnostics_of("const big = 1e400\n")
    assert (diagnostic.line, diagnostic.column) == (1, 13)
    assert "number out of range" in diagnostic.message
    (diagnostic,) = diagnostics_of("param P default 1 max 1e999\n")
    assert "number out of range" in diagnostic.message
    (diagnostic,) = diagnostics_of("rule r: on PARAM_SET(param_value->v)\n    require v < 1e400\n")
    assert diagnostic.line == 2
    assert "number out of range" in diagnostic.message
    (diagnostic,) = diagnostics_of_defines("const m1 = 10\n", {"m1": float("inf")})
    assert "define m1" in diagnostic.message


def diagnostics_of_defines(text: str, defines):
    with pytest.raises(SpecError) as info:
        parse_spec(text, defines)
    return info.value.diagnostics


def test_parse_defines_rejects_non_finite_values():
    assert parse_defines(["m1=10", "m3=0.5"]) == {"m1": 10.0, "m3": 0.5}
    with pytest.raises(ValueError, match="not finite"):
        parse_defines(["m1=inf"])
    with pytest.raises(ValueError, match="not finite"):
        parse_defines(["m1=1e400"])
