import itertools
import json
import math

import numpy as np
import pytest
import torch

from helpers import FIG1, all_trees, f1_oracle, fig1, random_tree
from syntaxlm.evalsuite import (ProposalSet, SGItem, bracket_f1, compare_logprobs, corpus_f1, corpus_ppl,
                                distinct, doc_marginal, joint_logprob, labeled_spans, load_proposals,
                                load_sg_suite, logsumexp, marginal_lower_bound, parse_criterion, ppl_from_logprobs,
                                rerank, sg_score, word_prefix_logprobs, word_surprisals, write_proposals)
from syntaxlm.maskgen import PRESETS
from syntaxlm.model import LanguageModel, ModelConfig, output_ids
from syntaxlm.synthetic import ambiguous_grammar
from syntaxlm.treebank import Tree, build_vocab, parse_bracketed, serialize, to_left_branching

SECOND = "(S (NP the bird NP) (VP flies VP) S)"


class TableModel:
    """Joint log-probabilities looked up by tree."""

    def __init__(self, table):
        self.table = {serialize(parse_bracketed(k) if isinstance(k, str) else k): v for k, v in table.items()}

    def joint_logprobs(self, trees):
        return np.array([self.table[serialize(t)] for t in trees])


@pytest.fixture(scope="module")
def vocab():
    return build_vocab([fig1(), parse_bracketed(SECOND), parse_bracketed("(S (NP a cat NP) (VP sings VP) S)")])


def make_lm(vocab, preset="tg", seed=0, **kw):
    cfg = ModelConfig(len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32, mode=PRESETS[preset], seed=seed, **kw)
    lm = LanguageModel.create(cfg, vocab)
    lm.net.to(torch.float64)
    return lm


# -- basics -----------------------------------------------------------------


def test_logsumexp():
    assert logsumexp([]) == -math.inf
    assert logsumexp([-math.inf, -math.inf]) == -math.inf
    assert logsumexp([0.0, 0.0]) == pytest.approx(math.log(2))
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2))


def test_proposal_set_checks_terminals():
    with pytest.raises(ValueError):
        ProposalSet("1", ["a", "b"], [parse_bracketed("(S a S)")])


def test_duplicates_are_removed_with_warning():
    t = fig1()
    with pytest.warns(UserWarning):
        assert distinct([t, t, to_left_branching(t)]) == [t, to_left_branching(t)]
    m = TableModel({FIG1: -1.0})
    with pytest.warns(UserWarning):
        assert marginal_lower_bound(m, [t, t]) == pytest.approx(-1.0)


def test_proposal_file_round_trip(tmp_path):
    sets = [ProposalSet("a", fig1().leaves(), [fig1(), to_left_branching(fig1())]),
            ProposalSet("b", ["the", "bird", "flies"], [parse_bracketed(SECOND)])]
    write_proposals(sets, tmp_path / "p.jsonl")
    back = load_proposals(tmp_path / "p.jsonl")
    assert list(back) == ["a", "b"]
    assert back["a"].trees == sets[0].trees
    (tmp_path / "bad.jsonl").write_text('{"id": 1, "trees": []}\n')
    with pytest.raises(ValueError):
        load_proposals(tmp_path / "bad.jsonl")
    (tmp_path / "dup.jsonl").write_text((tmp_path / "p.jsonl").read_text().splitlines()[0] + "\n" * 2
                                        + (tmp_path / "p.jsonl").read_text().splitlines()[0] + "\n")
    with pytest.raises(ValueError):
        load_proposals(tmp_path / "dup.jsonl")


# -- joint and marginal probabilities --------------------------------------------


def test_uniform_model_joint(vocab):
    lm = make_lm(vocab, init_std=0.0)
    n_events = len(lm.encode(fig1()).event_positions)
    n_out = len(output_ids(vocab, lm.view))
    assert joint_logprob(lm, fig1()) == pytest.approx(-n_events * math.log(n_out), abs=1e-9)


def test_overfit_joint_near_zero(overfit_fig1):
    assert joint_logprob(overfit_fig1, fig1()) > -0.1


def test_probability_mass_over_small_trees_is_at_most_one():
    vocab = build_vocab([parse_bracketed("(X w X)")])
    for preset in ("tg", "txl-trees"):
        lm = make_lm(vocab, preset, seed=3)
        trees = [Tree("X", t.children) for t in all_trees(4, 3)]
        total = math.exp(logsumexp(lm.joint_logprobs(trees)))
        assert 0 < total <= 1.0


def test_single_proposal_bound_is_joint(vocab):
    lm = make_lm(vocab)
    assert marginal_lower_bound(lm, [fig1()]) == pytest.approx(joint_logprob(lm, fig1()), abs=1e-12)


def test_bound_is_monotone_in_proposals(vocab):
    lm = make_lm(vocab)
    words = fig1().leaves()
    shapes = [t for t in all_trees(3, 4) if len(t.leaves()) == 4]
    pool = distinct([_relabel(t, iter(words), "S") for t in shapes])[:12]
    assert len(pool) == 12
    prev = -math.inf
    for k in range(1, len(pool) + 1):
        cur = marginal_lower_bound(lm, pool[:k])
        assert cur >= prev
        prev = cur


def _relabel(tree, words, label="NP"):
    kids = tuple(next(words) if isinstance(c, str) else _relabel(c, words) for c in tree.children)
    return Tree(label, kids)


def test_full_parse_set_gives_exact_marginal():
    g = ambiguous_grammar()
    words = ["dogs", "see", "cats", "in", "parks", "with", "hats"]
    parses = [t for t, _ in g.parses(words)]
    assert len(parses) == 5
    exact = g.inside(words)
    assert marginal_lower_bound(g, parses) == pytest.approx(exact, abs=1e-9)
    for r in range(1, len(parses)):
        for subset in itertools.combinations(parses, r):
            assert marginal_lower_bound(g, list(subset)) < exact


def test_terminals_model_bound_is_exact(vocab):
    lm = make_lm(vocab, "txl-terminals")
    a = marginal_lower_bound(lm, [fig1()])
    b = marginal_lower_bound(lm, [to_left_branching(fig1()), fig1()])
    assert a == b


# -- perplexity ---------------------------------------------------------------


def test_ppl_two_sentence_example():
    m = TableModel({"(S a S)": -2.0, "(S b c S)": -4.0})
    data = [("1", ["a"]), ("2", ["b", "c"])]
    props = {"1": ProposalSet("1", ["a"], [parse_bracketed("(S a S)")]),
             "2": ProposalSet("2", ["b", "c"], [parse_bracketed("(S b c S)")])}
    rep = corpus_ppl(m, data, props)
    assert abs(rep.ppl - math.e ** 2) < 1e-12
    assert rep.n_words == 3
    assert ppl_from_logprobs([-2.0, -4.0], 3) == pytest.approx(math.e ** 2, abs=1e-12)
    assert corpus_ppl(m, data[::-1], props).ppl == pytest.approx(rep.ppl, abs=1e-12)
    assert rep.to_json()["total_nll"] == pytest.approx(6.0)


def test_ppl_errors():
    m = TableModel({"(S a S)": -2.0})
    with pytest.raises(ValueError):
        corpus_ppl(m, [])
    with pytest.raises(ValueError, match="7"):
        corpus_ppl(m, [("7", ["a"])], {})
    with pytest.raises(ValueError):
        ppl_from_logprobs([-1.0], 0)


def test_terminals_ppl_is_mean_event_nll(vocab):
    lm = make_lm(vocab, "txl-terminals")
    trees = [fig1(), parse_bracketed(SECOND)]
    rep = corpus_ppl(lm, [(str(i), t.leaves()) for i, t in enumerate(trees)])
    total = sum(float(np.sum(lp)) for lp in lm.event_logprobs(trees))
    assert rep.ppl == pytest.approx(math.exp(-total / 7), rel=1e-12)


# -- documents -----------------------------------------------------------------


def small_doc():
    s1 = ProposalSet("0", fig1().leaves(), [fig1(), to_left_branching(fig1())])
    t2 = parse_bracketed(SECOND)
    s2 = ProposalSet("1", t2.leaves(), [t2, to_left_branching(t2), Tree("S", tuple(t2.leaves()))])
    return [s1, s2]


def test_single_sentence_document_is_marginal(vocab):
    lm = make_lm(vocab)
    s1 = small_doc()[0]
    score, chosen = doc_marginal(lm, [s1])
    assert score == pytest.approx(marginal_lower_bound(lm, s1), abs=1e-9)
    assert len(chosen) == 1


def test_document_matches_brute_force(vocab):
    lm = make_lm(vocab)
    s1, s2 = small_doc()
    score, chosen = doc_marginal(lm, [s1, s2])
    first = [lm.joint_logprob(t) for t in s1.trees]
    best = s1.trees[int(np.argmax(first))]
    # log p(second | best prefix) = log p(prefix, second) - log p(prefix) over whole-document scoring
    cond = [lm.joint_logprob([best, t]) - max(first) for t in s2.trees]
    assert score == pytest.approx(logsumexp(first) + logsumexp(cond), abs=1e-9)
    assert chosen[0] == best


def test_document_ignores_proposal_order(vocab):
    lm = make_lm(vocab)
    s1, s2 = small_doc()
    a, _ = doc_marginal(lm, [s1, s2])
    s1r = ProposalSet(s1.id, s1.words, s1.trees[::-1])
    s2r = ProposalSet(s2.id, s2.words, s2.trees[::-1])
    b, _ = doc_marginal(lm, [s1r, s2r])
    assert a == pytest.approx(b, abs=1e-12)


# -- reranking and F1 ----------------------------------------------------------------


def test_rerank_picks_gold_under_overfit_model(overfit_fig1):
    props = [to_left_branching(fig1()), fig1(), Tree("S", tuple(fig1().leaves()))]
    idx, tree = rerank(overfit_fig1, props)
    assert idx == 1 and tree == fig1()


def test_rerank_ties_and_single():
    t, u = fig1(), to_left_branching(fig1())
    m = TableModel({t: -1.0, u: -1.0})
    assert rerank(m, [u, t, u])[0] == 0
    assert rerank(m, [t]) == (0, t)
    with pytest.raises(ValueError):
        rerank(m, [])


def test_f1_examples():
    assert bracket_f1(fig1(), fig1()) == (100.0, 100.0, 100.0)
    assert labeled_spans(fig1()) == {("S", 0, 4): 1, ("NP", 0, 3): 1, ("VP", 3, 4): 1}
    p, r, f = bracket_f1(fig1(), to_left_branching(fig1()))
    assert p == pytest.approx(200 / 3) and r == pytest.approx(200 / 3) and f == pytest.approx(200 / 3)
    assert bracket_f1(parse_bracketed("(A x A)"), parse_bracketed("(B x B)")) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        bracket_f1(fig1(), parse_bracketed("(S a S)"))


def test_f1_symmetry_and_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = random_tree(rng)
        p = random_tree(rng)
        words = iter(g.leaves())
        n = len(p.leaves())
        if n != len(g.leaves()):
            continue
        p = _with_words(p, words)
        pg, rg, fg = bracket_f1(g, p)
        pp, rp, fp = bracket_f1(p, g)
        assert (pg, rg) == pytest.approx((rp, pp))
        assert fg == pytest.approx(fp)
        assert (pg, rg, fg) == pytest.approx(f1_oracle(serialize(g), serialize(p)))


def _with_words(tree, words):
    return Tree(tree.label, tuple(next(words) if isinstance(c, str) else _with_words(c, words)
                                  for c in tree.children))


def test_corpus_f1_is_micro_averaged():
    g = [fig1(), parse_bracketed(SECOND)]
    p = [to_left_branching(fig1()), parse_bracketed(SECOND)]
    prec, rec, f = corpus_f1(g, p)
    assert prec == pytest.approx(100 * 5 / 6)
    with pytest.raises(ValueError):
        corpus_f1(g, p[:1])


# -- surprisal ------------------------------------------------------------------


def test_prefix_logprobs_single_tree(vocab):
    lm = make_lm(vocab)
    enc = lm.encode(fig1())
    lp = lm.event_logprobs([enc])[0]
    targets = enc.event_positions + 1
    cum = np.cumsum(lp)
    term = [k for k, p in enumerate(targets) if enc.kinds[p].name == "T"]
    np.testing.assert_allclose(word_prefix_logprobs(lm, [fig1()]), cum[term], atol=1e-12)


def test_prefix_logprobs_merge_shared_prefixes(vocab):
    lm = make_lm(vocab)
    a, b = fig1(), to_left_branching(fig1())
    pa, pb = word_prefix_logprobs(lm, [a]), word_prefix_logprobs(lm, [b])
    both = word_prefix_logprobs(lm, [a, b])
    # the two trees' action prefixes differ from the first word on
    np.testing.assert_allclose(both, np.logaddexp(pa, pb), atol=1e-12)
    # a tree sharing fig1's prefix up to "bird" counts that prefix once
    c = parse_bracketed("(S (NP the blue bird NP) sings S)")
    pc = word_prefix_logprobs(lm, [c])
    merged = word_prefix_logprobs(lm, [a, c])
    np.testing.assert_allclose(merged[:3], pa[:3], atol=1e-12)
    assert merged[3] == pytest.approx(np.logaddexp(pa[3], pc[3]), abs=1e-12)


def test_surprisals_nonnegative(vocab):
    lm = make_lm(vocab)
    s = word_surprisals(lm, [fig1(), to_left_branching(fig1())])
    assert (s >= 0).all()
    assert s.sum() == pytest.approx(-word_prefix_logprobs(lm, [fig1(), to_left_branching(fig1())])[-1])


def test_parse_criterion():
    assert parse_criterion("s(A) < s(B) && s(C)>s(D)") == [("A", "<", "B"), ("C", ">", "D")]
    assert parse_criterion("s(A) < s(B) and s(A) < s(C)") == [("A", "<", "B"), ("A", "<", "C")]
    with pytest.raises(ValueError):
        parse_criterion("s(A) <= s(B)")


def sg_items_for(overfit=True):
    other = parse_bracketed("(S (NP the blue NP) (VP sings VP) S)")
    conds = {"A": {"tree": FIG1, "region": [0, 4]}, "B": {"tree": serialize(other), "region": [0, 3]}}
    return {"suite": "toy", "items": [{"conditions": conds, "criterion": "s(A) < s(B)"},
                                      {"conditions": conds, "criterion": "s(A) < s(A)"}]}


def test_sg_scoring(tmp_path, overfit_fig1):
    (tmp_path / "s.json").write_text(json.dumps(sg_items_for()))
    items = load_sg_suite(tmp_path / "s.json")
    report = sg_score(overfit_fig1, items)
    assert [r["passed"] for r in report.items] == [True, False]
    assert report.suites == {"toy": 0.5}
    doubled = sg_score(overfit_fig1, items + items)
    assert doubled.suites == report.suites
    assert json.loads(json.dumps(report.to_json()))["mean_accuracy"] == 0.5


def test_sg_self_comparison_always_fails(vocab):
    lm = make_lm(vocab)
    item = SGItem("x", {"A": _cond(fig1())}, "s(A) < s(A)")
    assert sg_score(lm, [item]).suites == {"x": 0.0}


def _cond(tree, region=(0, 1)):
    from syntaxlm.evalsuite import SGCondition
    return SGCondition(tree.leaves(), region, [tree])


def test_sg_item_validation():
    with pytest.raises(ValueError):
        SGItem("x", {"A": _cond(fig1())}, "s(A) < s(B)")
    with pytest.raises(ValueError):
        SGItem("x", {"A": _cond(fig1(), (2, 9))}, "s(A) < s(A)")


def test_sg_uses_proposals_by_sentence(vocab):
    from syntaxlm.evalsuite import SGCondition
    lm = make_lm(vocab)
    item = SGItem("x", {"A": SGCondition(fig1().leaves(), (0, 4)),
                        "B": SGCondition(fig1().leaves(), (0, 1))}, "s(A) > s(B)")
    with pytest.raises(ValueError):
        sg_score(lm, [item])
    props = {"p": ProposalSet("p", fig1().leaves(), [fig1()])}
    assert sg_score(lm, [item], props).suites["x"] == 1.0


# -- comparison -----------------------------------------------------------------


def test_compare_with_itself(vocab):
    lm = make_lm(vocab)
    docs = [[fig1(), parse_bracketed(SECOND)]]
    recs = compare_logprobs(lm, lm, docs)
    assert all(r["delta"] == 0.0 for r in recs)
    assert len(recs) == len(lm.encode(docs[0]).event_positions)


def test_compare_flags(vocab):
    tg, txl = make_lm(vocab), make_lm(vocab, "txl-trees", seed=1)
    recs = compare_logprobs(tg, txl, [[fig1(), parse_bracketed(SECOND)]])
    birds = [r for r in recs if r["token"] == "bird"]
    assert [r["sentence"] for r in birds] == [0, 1]
    assert not birds[0]["previous_sentence"] and not birds[0]["current_sentence"] and birds[0]["absent"]
    assert birds[1]["previous_sentence"] and not birds[1]["current_sentence"] and not birds[1]["absent"]
    flies = [r for r in recs if r["token"] == "flies"][0]
    assert flies["absent"]
    np_closings = [r for r in recs if r["token"] == "NP)"]
    assert np_closings[0]["kind"] == "CNT"


def test_compare_requires_same_vocab(vocab):
    other = build_vocab([fig1()])
    with pytest.raises(ValueError):
        compare_logprobs(make_lm(vocab), make_lm(other), [[fig1()]])
    with pytest.raises(ValueError):
        compare_logprobs(make_lm(vocab), make_lm(vocab, "txl-terminals"), [[fig1()]])
