import itertools
import json

import numpy as np
import pytest

from dualkbqa.data import (
    ENTITY_TOKEN,
    DataError,
    GenerationError,
    QAExample,
    SynthConfig,
    Vocab,
    follow_path,
    generate,
    load,
    load_dataset,
    make_instance,
    save,
    save_dataset,
    statistics,
)
from dualkbqa.graph import KnowledgeGraph, extract_subgraph

SMALL = dict(entities_per_question=12, entity_pool=60, num_relations=4, facts_per_question=20, train=30, dev=10, test=10)


def fixture():
    return [
        QAExample(["who", "r", "of", "a"], [["a", "r", "b"]], ["a"], ["b"], id="q0"),
        QAExample(["x", "s", "b"], [["b", "s", "c"], ["c", "r", "a"]], ["b"], ["c", "a"], id="q1"),
        QAExample(["what"], [["d", "t", "d"]], ["d"], []),
    ]


def test_round_trip(tmp_path):
    path = tmp_path / "f.jsonl"
    save(fixture(), path)
    assert load(path) == fixture()


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("\n")
    with pytest.raises(DataError, match="no examples"):
        load(path)


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load(tmp_path / "nope.jsonl")


@pytest.mark.parametrize(
    "bad, message",
    [
        ("{not json", "invalid JSON"),
        ('{"question_tokens": ["a"], "triples": [], "topic_entities": ["a"]}', "answers"),
        ('{"question_tokens": ["a"], "triples": [["a", "r"]], "topic_entities": ["a"], "answers": []}', "triples"),
        ('{"question_tokens": [], "triples": [], "topic_entities": ["a"], "answers": []}', "empty question"),
        ("[1, 2]", "JSON object"),
    ],
)
def test_malformed_line_reports_line_number(tmp_path, bad, message):
    path = tmp_path / "bad.jsonl"
    good = fixture()[0].to_json()
    path.write_text(f"{good}\n{good}\n{bad}\n")
    with pytest.raises(DataError, match=rf"bad\.jsonl:3: .*{message}"):
        load(path)


def test_statistics_fixture():
    stats = statistics(fixture())
    # entity counts 2, 3, 1; fact counts 1, 2, 1
    assert stats["avg_entities"] == pytest.approx(2.0)
    assert stats["avg_facts"] == pytest.approx(4 / 3)
    assert stats["questions"] == 3


def test_vocab_first_occurrence_and_entity_token():
    v = Vocab.build(fixture())
    assert v.tokens[0] == ENTITY_TOKEN
    assert v.tokens[1:4] == ["who", "r", "of"]
    assert v.entities[:3] == ["a", "b", "c"]
    assert v.relations == ["r", "s", "t"]
    ids = v.encode_tokens(["who", "r", "of", "a"])
    assert ids.tolist() == [1, 2, 3, 0]
    assert v.relation_name(1) == "s" and v.relation_name(4) == "s^-1"


def test_make_instance_local_ids():
    ex = fixture()[1]
    inst = make_instance(ex, Vocab.build(fixture()))
    sg = inst.subgraph
    assert sg.topics == (0,)
    assert sg.num_facts == 4  # two facts plus inverses
    assert sorted(sg.entities[a] for a in inst.answers) == sorted(inst.gold)


# ---------------------------------------------------------------- generator


def test_same_seed_byte_identical(tmp_path):
    save_dataset(generate(SynthConfig(seed=4, **SMALL)), tmp_path / "a")
    save_dataset(generate(SynthConfig(seed=4, **SMALL)), tmp_path / "b")
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != _bytes(generate(SynthConfig(seed=5, **SMALL)))


def _bytes(ds):
    return "".join(ex.to_json() + "\n" for ex in ds["train"]).encode()


def test_dataset_directory_round_trip(tmp_path):
    ds = generate(SynthConfig(seed=1, **SMALL))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.splits == ds.splits
    assert back.vocab.tokens == ds.vocab.tokens and back.vocab.entities == ds.vocab.entities
    assert back.manifest["config"]["seed"] == 1


def test_load_dataset_requires_train(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def parse_question(ex):
    """Recover (topic, path, constraint) from the templated tokens."""
    toks = ex.question_tokens
    if "with" in toks:
        w = toks.index("with")
        constraint = (toks[w + 1], toks[w + 2])
        toks = toks[:w]
    else:
        constraint = None
    rels = [t for t in toks if t.startswith("r")]
    return toks[-1], list(reversed(rels)), constraint


def brute_force_answers(ex, hops):
    topic, path, constraint = parse_question(ex)
    facts = [tuple(t) for t in ex.triples]
    answers = set()
    for chain in itertools.product(facts, repeat=hops):
        ok = chain[0][0] == topic and all(chain[i][2] == chain[i + 1][0] for i in range(hops - 1))
        if ok and [f[1] for f in chain] == path:
            answers.add(chain[-1][2])
    if constraint is not None:
        rc, c = constraint
        answers = {a for a in answers if (a, rc, c) in facts}
    return answers


@pytest.mark.parametrize("hops", [1, 2, 3])
def test_answers_match_exhaustive_search(hops):
    cfg = SynthConfig(seed=hops, hops=hops, constraint_prob=0.5, **{**SMALL, "train": 25, "dev": 5, "test": 5})
    ds = generate(cfg)
    saw_constraint = False
    for split in ds.splits.values():
        for ex in split:
            assert set(ex.answers) == brute_force_answers(ex, hops)
            assert ex.answers and len(ex.answers) <= cfg.max_answers
            saw_constraint |= "with" in ex.question_tokens
    assert saw_constraint


def test_one_hop_answers_are_all_tails():
    ds = generate(SynthConfig(seed=0, hops=1, constraint_prob=0.0, **SMALL))
    for ex in ds["train"]:
        topic, (r,), _ = parse_question(ex)
        assert set(ex.answers) == {t for h, rr, t in ex.triples if h == topic and rr == r}


def test_answers_and_topics_inside_subgraph_and_connected():
    cfg = SynthConfig(seed=2, **SMALL)
    for ex in generate(cfg)["train"]:
        kg = KnowledgeGraph.from_named(ex.triples)
        ents = set(kg.entities)
        assert set(ex.answers) <= ents and set(ex.topic_entities) <= ents
        topic = kg.entities.index(ex.topic_entities[0])
        within = extract_subgraph(kg, [topic], cfg.hops)
        assert within.num_entities == len(ents)


def test_splits_disjoint():
    ds = generate(SynthConfig(seed=3, **SMALL))
    keys = [json.dumps([ex.question_tokens, sorted(map(tuple, ex.triples))]) for s in ds.splits.values() for ex in s]
    assert len(keys) == len(set(keys))
    assert [len(ds[s]) for s in ("train", "dev", "test")] == [30, 10, 10]


def test_stress_mode_pairs_inverse_relations():
    ds = generate(SynthConfig(seed=0, stress=True, **SMALL))
    for ex in ds["train"][:10]:
        facts = {tuple(t) for t in ex.triples}
        for h, r, t in facts:
            partner = f"r{int(r[1:]) ^ 1}"
            assert (t, partner, h) in facts


def test_follow_path():
    facts = [(0, 0, 1), (0, 0, 2), (1, 1, 3), (2, 1, 3), (2, 1, 4)]
    assert follow_path(facts, [0], [0]) == {1, 2}
    assert follow_path(facts, [0], [0, 1]) == {3, 4}
    assert follow_path(facts, [0], [1]) == set()


def test_config_validation_and_retry_cap():
    with pytest.raises(ValueError):
        SynthConfig(hops=0)
    with pytest.raises(ValueError):
        SynthConfig(stress=True, num_relations=3)
    with pytest.raises(GenerationError):
        generate(SynthConfig(entities_per_question=3, entity_pool=3, num_relations=1, facts_per_question=1,
                             max_answers=0, train=1, dev=0, test=0, max_retries=5))


def test_statistics_of_generated_data():
    stats = statistics(generate(SynthConfig(seed=0, **SMALL))["train"])
    assert stats["avg_entities"] == pytest.approx(12.0)
    assert stats["avg_facts"] >= 20
    assert np.isfinite(stats["avg_answers"])
