import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import FIG1, FIG1_DUP, all_trees, fig1, label_multiset_by_level, random_tree
from syntaxlm.treebank import (Kind, SequenceError, Tree, TreeParseError, Vocabulary, build_vocab, concat,
                               duplicate_closing, linearize, parse_bracketed, read_documents, read_trees,
                               reverse_structure, serialize, strip_duplicates, to_left_branching,
                               to_right_branching, to_tree, to_trees, write_trees)


def ancestor_depths(tree: Tree) -> list[int]:
    """Depth oracle computed on the tree: ancestors of each node, closings duplicated."""
    out = []

    def walk(node, n_anc):
        out.append(n_anc)
        for c in node.children:
            if isinstance(c, str):
                out.append(n_anc + 1)
            else:
                walk(c, n_anc + 1)
        out.extend([n_anc, n_anc])

    walk(tree, 0)
    return out


# -- parsing ----------------------------------------------------------------


def test_parse_fig1():
    t = fig1()
    assert t.label == "S"
    assert len(t.children) == 2
    assert t.leaves() == ["the", "blue", "bird", "sings"]
    assert serialize(t) == FIG1


def test_parse_single_terminal():
    t = parse_bracketed("(X w X)")
    assert t == Tree("X", ("w",))


def test_parse_accepts_ptb_closings_and_spacing():
    t = parse_bracketed("(S (NP the  blue bird)\t(VP sings))")
    assert serialize(t) == FIG1


@pytest.mark.parametrize("text", ["(S (NP the NP)", "(S the S) S)", "(S (NP NP) S)", "(S )",
                                  "", "the bird", "(S a S) (S b S)"])
def test_parse_errors(text):
    with pytest.raises(TreeParseError):
        parse_bracketed(text)


def test_parse_error_reports_position():
    with pytest.raises(TreeParseError) as exc:
        parse_bracketed("(S (NP the NP) (VP runs", line=7)
    assert exc.value.line == 7
    assert exc.value.column == 16


def test_mismatched_closing_reads_as_ptb_word():
    # "VP)" under an open S is a word followed by a bare PTB closing
    assert parse_bracketed("(S the VP)") == Tree("S", ("the", "VP"))


def test_empty_constituent_rejected_by_tree():
    with pytest.raises(ValueError):
        Tree("X", ())


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    trees = [random_tree(rng) for _ in range(50)]
    write_trees(trees, tmp_path / "t.trees")
    assert read_trees(tmp_path / "t.trees") == trees


def test_read_documents(tmp_path):
    (tmp_path / "d.txt").write_text(f"{FIG1}\n(X w X)\n\n\n(S (NP a NP) S)\n")
    docs = read_documents(tmp_path / "d.txt")
    assert [len(d) for d in docs] == [2, 1]


def test_read_trees_reports_line(tmp_path):
    (tmp_path / "bad.trees").write_text(f"{FIG1}\n(S (NP x S)\n")
    with pytest.raises(TreeParseError) as exc:
        read_trees(tmp_path / "bad.trees")
    assert exc.value.line == 2


# -- linearization ----------------------------------------------------------


def test_linearize_fig1():
    seq = linearize(fig1())
    assert " ".join(seq.tokens) == FIG1
    K = Kind
    assert seq.kinds == [K.ONT, K.ONT, K.T, K.T, K.T, K.CNT, K.ONT, K.T, K.CNT, K.CNT]
    assert not seq.duplicated


def test_linearize_minimal():
    assert linearize(parse_bracketed("(X w X)")).kinds == [Kind.ONT, Kind.T, Kind.CNT]


def test_duplicate_fig1():
    dup = duplicate_closing(linearize(fig1()))
    assert " ".join(dup.tokens) == FIG1_DUP
    assert len(dup) == 13
    assert dup.depths == [0, 1, 2, 2, 2, 1, 1, 1, 2, 1, 1, 0, 0]
    assert dup.depths == ancestor_depths(fig1())


def test_duplicate_minimal():
    dup = duplicate_closing(linearize(parse_bracketed("(X w X)")))
    assert dup.kinds == [Kind.ONT, Kind.T, Kind.CNT1, Kind.CNT2]


def test_duplicate_twice_rejected():
    dup = duplicate_closing(linearize(fig1()))
    with pytest.raises(ValueError):
        duplicate_closing(dup)


def test_depths_match_oracle_on_random_trees():
    rng = np.random.default_rng(0)
    for _ in range(300):
        t = random_tree(rng, 15)
        assert duplicate_closing(linearize(t)).depths == ancestor_depths(t)


def test_duplication_invariants():
    rng = np.random.default_rng(1)
    for _ in range(300):
        raw = linearize(random_tree(rng, 15))
        dup = duplicate_closing(raw)
        n_cnt = sum(k == Kind.CNT for k in raw.kinds)
        assert len(dup) == len(raw) + n_cnt
        assert [a for a in dup if a.kind not in (Kind.CNT1, Kind.CNT2)] == [a for a in raw if a.kind != Kind.CNT]
        for i, a in enumerate(dup):
            if a.kind == Kind.CNT2:
                assert dup[i - 1].kind == Kind.CNT1 and dup[i - 1].token == a.token
        dup.validate()
        assert strip_duplicates(dup) == raw
        assert to_tree(dup) == to_tree(raw)


def test_ont_depth_equals_closing_depth():
    rng = np.random.default_rng(2)
    for _ in range(100):
        dup = duplicate_closing(linearize(random_tree(rng, 15)))
        stack = []
        for a in dup:
            if a.kind == Kind.ONT:
                stack.append(a.depth)
            elif a.kind == Kind.CNT1:
                assert a.depth == stack.pop()
            elif a.kind == Kind.CNT2:
                pass


@pytest.mark.parametrize("bad", [
    "(S the", "(S the S) S)", "(S (NP the VP) S)",
])
def test_validate_rejects_unbalanced(bad):
    from syntaxlm.treebank import Action, ActionSequence

    acts = []
    for tok in bad.split():
        if tok.startswith("("):
            acts.append(Action(tok, Kind.ONT, 0))
        elif tok.endswith(")"):
            acts.append(Action(tok, Kind.CNT, 0))
        else:
            acts.append(Action(tok, Kind.T, 1))
    with pytest.raises(SequenceError):
        ActionSequence(tuple(acts)).validate()


def test_concat_documents():
    a, b = linearize(fig1()), linearize(parse_bracketed("(X w X)"))
    doc = concat([a, b])
    assert len(doc) == len(a) + len(b)
    assert to_trees(doc) == [fig1(), parse_bracketed("(X w X)")]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_round_trips(seed):
    t = random_tree(np.random.default_rng(seed))
    assert parse_bracketed(serialize(t)) == t
    assert to_tree(linearize(t)) == t
    assert to_tree(duplicate_closing(linearize(t))) == t


# -- transforms -------------------------------------------------------------


def test_transforms_fig1():
    t = fig1()
    assert serialize(to_left_branching(t)) == "(S (NP (VP the blue VP) bird NP) sings S)"
    assert serialize(to_right_branching(t)) == "(S the (NP blue (VP bird sings VP) NP) S)"
    assert serialize(reverse_structure(t)) == "(S (VP the VP) (NP blue bird sings NP) S)"


@pytest.mark.parametrize("fn", [to_left_branching, to_right_branching, reverse_structure])
def test_transforms_single_terminal(fn):
    t = parse_bracketed("(X w X)")
    assert fn(t) == t


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_transforms_preserve_terminals(seed):
    t = random_tree(np.random.default_rng(seed))
    for fn in (to_left_branching, to_right_branching, reverse_structure):
        out = fn(t)
        assert out.leaves() == t.leaves()
        out_seq = duplicate_closing(linearize(out))
        out_seq.validate()
        assert to_tree(out_seq) == out


def test_branching_shapes_are_binary_spines():
    rng = np.random.default_rng(4)
    for _ in range(100):
        t = random_tree(rng)
        n = len(t.leaves())
        if n < 2:
            continue
        for fn, spine_side in ((to_left_branching, 0), (to_right_branching, -1)):
            out = fn(t)
            assert out.n_nodes() == n - 1
            node = out
            while isinstance(node, Tree):
                assert len(node.children) == 2
                nxt = node.children[spine_side]
                if not isinstance(nxt, Tree):
                    break
                node = nxt


def test_reverse_twice_restores_skeleton_exhaustively():
    for t in all_trees(4, 3):
        twice = reverse_structure(reverse_structure(t))
        assert twice == t
        assert label_multiset_by_level(twice) == label_multiset_by_level(t)


def test_reverse_twice_restores_labelled_trees():
    rng = np.random.default_rng(5)
    for _ in range(300):
        t = random_tree(rng)
        assert reverse_structure(reverse_structure(t)) == t


# -- vocabulary -------------------------------------------------------------


def test_vocab_fig1():
    v = build_vocab([fig1()])
    assert len(v.ids_of_class("terminal")) == 4
    assert len(v.ids_of_class("ont")) == 3
    assert len(v.ids_of_class("cnt")) == 3
    assert len(v) == 4 + 3 + 3 + 4
    # ids are dense
    assert sorted(v.index.values()) == list(range(len(v)))


def test_vocab_min_count_unk():
    v = build_vocab([fig1()], min_count=10 ** 9)
    assert v.ids_of_class("terminal") == []
    dup = duplicate_closing(linearize(fig1()))
    ids = [v.id(a) for a in dup]
    assert [i for i, a in zip(ids, dup) if a.kind == Kind.T] == [v.unk_id] * 4
    assert len(v.labels) == 3


def test_vocab_cnt_shares_id():
    v = build_vocab([fig1()])
    dup = duplicate_closing(linearize(fig1()))
    assert v.id(dup[5]) == v.id(dup[6])


def test_vocab_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    v = build_vocab([random_tree(rng) for _ in range(30)], min_count=2)
    v.save(tmp_path / "v.tsv")
    assert Vocabulary.load(tmp_path / "v.tsv") == v
    assert Vocabulary.from_json(v.to_json()) == v
    line = (tmp_path / "v.tsv").read_text().splitlines()[0]
    assert line.split("\t") == ["<pad>", "0", "special"]


def test_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])
