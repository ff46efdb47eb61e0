import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuromas.errors import TaskError
from neuromas.messaging import NO_ANSWER
from neuromas.tasks import (
    PipelineTaskFamily,
    all_instances,
    exact_match_reward,
    generate_pipeline_instance,
    load_task_file,
    oracle_answer,
    save_task_file,
    split_instances,
)

FIXTURE = Path(__file__).parent / "fixtures" / "pipeline_k3.json"

STAGES = ["identity", "reverse", "neighbor-sum", "carry", "prefix-sum", "shift-right", "rotate-left", "add-1", "add-3"]


@pytest.mark.parametrize("gold,pred,r", [("B", "B", 1.0), ("B", "C", 0.0), ("B", NO_ANSWER, 0.0), ("", "", 1.0)])
def test_exact_match_reward(gold, pred, r):
    assert exact_match_reward(gold, pred) == r


@pytest.mark.parametrize(
    "stages,x,y",
    [
        (["add-3-mod-10"], "25", "58"),
        (["reverse", "add-1-mod-10"], "19", "02"),
        (["identity"], "4071", "4071"),
        (["carry"], "212022", "222120"),
    ],
)
def test_hand_examples(stages, x, y):
    base = 3 if stages == ["carry"] else 10
    fam = PipelineTaskFamily(tuple(stages), len(x), base)
    assert fam.evaluate(x) == y
    assert oracle_answer(fam, fam.render_input(x)) == y


@pytest.mark.parametrize("case", json.loads(FIXTURE.read_text()), ids=lambda c: ">".join(c["stages"]))
def test_k3_fixture(case):
    x = case["x"]
    for k in range(1, 4):
        fam = PipelineTaskFamily(tuple(case["stages"][:k]), len(x), case["base"])
        assert fam.evaluate(x) == case["trace"][k - 1]
    assert fam.K == 3
    assert fam.instance(x).gold == case["trace"][-1]


@pytest.mark.parametrize("base", [2, 3, 10])
@pytest.mark.parametrize("stages", [("reverse", "add-1", "neighbor-sum"), ("carry", "carry", "carry"),
                                    ("prefix-sum", "rotate-left"), ("shift-right", "add-1", "digit-sum")])
def test_dual_implementation_agreement(stages, base):
    fam = PipelineTaskFamily(stages, 5, base)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        inst = generate_pipeline_instance(fam, rng)
        assert oracle_answer(fam, inst.input) == inst.gold


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(STAGES), min_size=1, max_size=3), st.integers(2, 10), st.data())
def test_random_families_agree_with_oracle(stages, base, data):
    if base < 4 and "add-3" in stages:
        stages = [s for s in stages if s != "add-3"] or ["identity"]
    fam = PipelineTaskFamily(tuple(stages), 4, base)
    x = data.draw(st.text(alphabet=fam.alphabet, min_size=4, max_size=4))
    y = fam.evaluate(x)
    assert oracle_answer(fam, fam.render_input(x)) == y
    assert len(y) == fam.output_length and set(y) <= set(fam.alphabet)


@pytest.mark.parametrize(
    "stages,base",
    [((), 10), (("bogus",), 10), (("add",), 10), (("reverse-2",), 10), (("add-1-mod-7",), 5), (("select-9",), 10)],
)
def test_bad_families(stages, base):
    with pytest.raises(TaskError):
        PipelineTaskFamily(stages, 4, base)


def test_oracle_rejects_malformed_input():
    fam = PipelineTaskFamily(("identity",), 3, 2)
    for bad in ["no digits", "apply identity to 0120", "apply identity to 01"]:
        with pytest.raises(TaskError):
            oracle_answer(fam, bad)


def test_split_is_disjoint_and_seeded():
    fam = PipelineTaskFamily(("add-1",), 4, 3)
    train, dev = split_instances(fam, None, 20, seed=5)
    assert len(train) + len(dev) == 81
    assert not {t.input for t in train} & {t.input for t in dev}
    assert split_instances(fam, None, 20, seed=5) == (train, dev)
    assert split_instances(fam, None, 20, seed=6)[1] != dev
    assert len(split_instances(fam, 7, 20, seed=5)[0]) == 7
    with pytest.raises(TaskError):
        split_instances(fam, None, 81, seed=0)


def test_all_instances_enumerates_every_input():
    fam = PipelineTaskFamily(("reverse",), 3, 2)
    assert sorted(t.params["digits"] for t in all_instances(fam)) == [f"{i:03b}" for i in range(8)]


def test_task_file_roundtrip(tmp_path):
    fam = PipelineTaskFamily(("reverse",), 3, 10)
    tasks = [fam.instance("123"), fam.instance("907")]
    path = save_task_file(tasks, tmp_path / "t.jsonl")
    back = load_task_file(path)
    assert [(t.input, t.gold) for t in back] == [(t.input, t.gold) for t in tasks]


@pytest.mark.parametrize("line", ['{"input": "x"}', "not json", '{"input": "x", "gold": "y", "task_kind": "essay"}'])
def test_task_file_rejects(tmp_path, line):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(TaskError):
        load_task_file(path)
