import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import UNIVERSAL, fixture_inputs, phrase_hits, random_fixture, reference_bullets, reference_tips
from probesql.errors import ParseFailure
from probesql.guidance import (
    GuidanceEngine,
    PlanStep,
    RealizedPlan,
    fallback_plan,
    load_library,
    parse_realized_plan,
    phrase_pattern,
    realize_plan,
    render_guidance,
    start_pattern,
)
from probesql.linking import LogicalPlan
from probesql.llm import Gateway, ReplayBackend
from probesql.schema import Column, DatabaseSchema, Table


def test_library_shape():
    lib = load_library()
    assert len(lib) == 52
    assert len(lib.categories) == 14
    assert set(lib.universal) == UNIVERSAL
    assert all(t.description and t.title for t in lib.tips.values())


def test_every_rule_emits_known_tips():
    engine = GuidanceEngine.default()
    assert len(engine.rules) == 25
    emitted = {t for r in engine.rules for t in r.emits}
    assert emitted <= set(engine.library.tips)


def test_universal_tips_always_present():
    ids = [t.id for t in GuidanceEngine.default().retrieve()]
    assert set(ids) == UNIVERSAL


@pytest.mark.parametrize("text,phrase,hit", [
    ("the ranked list", "rank", True),
    ("ranking", "rank", True),
    ("franking", "rank", False),
    ("Calculating it", "calculate", True),
    ("calculated", "calculate", True),
    ("calculates", "calculate", True),
    ("top  n\tper group", "top n per", True),
    ("topn per", "top n per", False),
    ("ordered by", "order by", False),
    ("order bys", "order by", True),
])
def test_phrase_inflection(text, phrase, hit):
    assert bool(phrase_pattern(phrase).search(text)) is hit
    assert bool(phrase_hits(text, phrase)) is hit


def test_starts_with_is_anchored():
    assert start_pattern("how many").search("  How   many rows")
    assert not start_pattern("how many").search("So how many rows")
    assert not start_pattern("list").search("listing")


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_engine_agrees_with_reference_matcher(seed):
    fx = random_fixture(random.Random(seed))
    engine = GuidanceEngine.default()
    q, e, plan, schema = fixture_inputs(fx)
    assert {t.id for t in engine.retrieve(q, e, plan, schema)} == reference_tips(fx)
    fired = set(engine.fired_rules(engine.context(q, e, plan, schema)))
    assert fired == {k for k, v in reference_bullets(fx).items() if v}


def test_case_study_question_gets_ranking_tips():
    q = ("Considering only the latest release versions of NPM packages, which packages are the top 8 most "
         "popular based on their GitHub star counts?")
    plan = RealizedPlan((PlanStep("Rank each package's releases by ordinal"),
                         PlanStep("Keep the first row per group")))
    ids = {t.id for t in GuidanceEngine.default().retrieve(q, "", plan, None)}
    assert {"TIP051", "TIP052", "TIP008"} <= ids
    assert "TIP049" not in ids  # the question does not open with a listing phrase


def test_render_guidance_sorted():
    lib = load_library()
    text = render_guidance([lib.tips["TIP019"], lib.tips["TIP009"]])
    assert text.index("[TIP009]") < text.index("[TIP019]")


def test_custom_rule_files(tmp_path):
    rules = tmp_path / "rules.json"
    rules.write_text(json.dumps({"rules": [
        {"id": "x", "source": "question", "emits": ["TIP006"], "when": {"regex": "zz+"}},
    ]}))
    engine = GuidanceEngine.from_files(rules_path=rules)
    assert "TIP006" in {t.id for t in engine.retrieve("azzz")}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rules": [{"id": "x", "source": "question", "emits": ["TIP999"], "when": {}}]}))
    with pytest.raises(ValueError):
        GuidanceEngine.from_files(rules_path=bad)


REALIZED = """Here is the plan.
**Step 1:** Find latest releases
- Info need: newest version per package
- Possible paths: ordinal, timestamp
- Keywords: latest, version
Step 2. Join stars
Keywords: [stars]
Evidence: stars live in PROJECTS
"""


def test_parse_realized_plan():
    plan = parse_realized_plan(REALIZED)
    assert [s.description for s in plan.steps] == ["Find latest releases", "Join stars"]
    assert plan.steps[0].possible_paths == ("ordinal", "timestamp")
    assert plan.keywords == ["latest", "version", "stars"]
    assert plan.steps[1].evidence_snippet == "stars live in PROJECTS"
    assert "Possible paths: ordinal, timestamp" in plan.text()
    with pytest.raises(ParseFailure):
        parse_realized_plan("no steps here")


def test_realize_plan_falls_back_when_unparseable():
    schema = DatabaseSchema("d", (Table("t", (Column("a"),)),)).full_subset()
    gw = Gateway(ReplayBackend([{"tag": "sql_kw", "response": "garbage"}] * 3))
    plan = realize_plan(gw, "How many rows", "", schema, LogicalPlan(("count",)))
    assert plan.fallback and plan.steps[0].keywords == ("How", "many", "rows")
    assert fallback_plan("x y").steps[0].description == "x y"
    with pytest.raises(ValueError):
        RealizedPlan(())
