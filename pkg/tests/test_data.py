import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedseit.data import (
    Corpus,
    TaskDataset,
    load_corpus,
    load_embeddings,
    load_grid,
    non_iid_split,
    pad_batch,
    save_grid,
    synth_embeddings,
    tokenize,
    write_corpus,
)
from fedseit.synthetic import SyntheticSpec, make_corpus


def shares_by_label(train, grid):
    """label -> list of per-cell sets of training document ids (train + valid)."""
    index = {}
    for i, (toks, lab) in enumerate(train.documents):
        index.setdefault((toks, lab), []).append(i)
    out = {}
    for row in grid:
        for d in row:
            ids = {lab: set() for lab in d.labels}
            for toks, y in d.train + d.valid:
                lab = d.labels[y]
                ids[lab].update(index[toks, lab])
            for lab, s in ids.items():
                out.setdefault(lab, []).append(s)
    return out


def test_tokenize_examples():
    assert tokenize("The cat, sat.") == ["the", "cat", "sat"]
    assert tokenize("") == []
    assert tokenize("U.S. stocks rose 3%") == ["u.s", "stocks", "rose", "3"]
    assert tokenize("  --  ...  ") == []


def test_corpus_drops_empty_documents():
    c = Corpus.from_texts([("hello world", "a"), ("!!!", "b"), ("", "a")])
    assert len(c.documents) == 1 and c.dropped == 2 and c.label_set == ["a"]


def test_load_corpus_tsv(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("pos\tGreat movie!\nneg\tBad.\n\n")
    c = load_corpus(p)
    assert c.documents == [(("great", "movie"), "pos"), (("bad",), "neg")]
    write_corpus(c, tmp_path / "d.tsv")
    assert load_corpus(tmp_path / "d.tsv").documents == c.documents


def test_load_corpus_bad_line(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("pos\tok\nno tab here\n")
    with pytest.raises(ValueError, match=":2:"):
        load_corpus(p)


def test_load_embeddings_basic(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("cat 0.1 0.2\n")
    tab = load_embeddings(p, 2)
    assert len(tab.vocab) == 1 and tab.matrix.shape == (2, 2)
    assert tab.lookup("cat").tolist() == [0.1, 0.2]
    assert tab.lookup("dog").tolist() == [0.0, 0.0]


def test_load_embeddings_header(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("1 2\ncat 0.1 0.2\n")
    assert load_embeddings(p, 2).vocab == {"cat": 0}


def test_load_embeddings_errors(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("cat 0.1 0.2\ndog 0.1\n")
    with pytest.raises(ValueError, match=":2:"):
        load_embeddings(p, 2)
    p.write_text("cat 0.1 zz\n")
    with pytest.raises(ValueError, match=":1: malformed"):
        load_embeddings(p, 2)


def test_synth_embeddings_deterministic():
    a, b = synth_embeddings(["x", "y", "z"], 4, 7), synth_embeddings(["z", "y", "x"], 4, 7)
    assert a.vocab == b.vocab and np.array_equal(a.matrix, b.matrix)
    assert np.all(np.abs(a.matrix) <= 0.1) and not np.any(a.matrix[-1])


def tiny_corpus(counts: dict[str, int]) -> Corpus:
    docs = [((f"{lab}w{i}",), lab) for lab, n in counts.items() for i in range(n)]
    return Corpus(docs)


def test_split_single_cell_gets_everything():
    train = tiny_corpus({"a": 5, "b": 7})
    grid = non_iid_split(train, Corpus([]), 1, 1, 2, seed=1)
    d = grid[0][0]
    assert len(d.train) + len(d.valid) == 12


def test_split_nine_docs_three_cells():
    train = tiny_corpus({"a": 9})
    grid = non_iid_split(train, Corpus([]), 3, 1, 1, seed=0)
    parts = shares_by_label(train, grid)["a"]
    assert [len(p) for p in parts] == [3, 3, 3]
    assert set().union(*parts) == set(range(9)) and sum(len(p) for p in parts) == 9


def test_split_deterministic_and_seed_sensitive():
    train, test = make_corpus(SyntheticSpec(labels=8, train_per_label=20, seed=1))
    a = non_iid_split(train, test, 2, 3, 4, seed=5)
    b = non_iid_split(train, test, 2, 3, 4, seed=5)
    c = non_iid_split(train, test, 2, 3, 4, seed=6)
    dump = lambda g: [[d.to_dict() for d in row] for row in g]  # noqa: E731
    assert dump(a) == dump(b) and dump(a) != dump(c)


def test_split_errors():
    train = tiny_corpus({"a": 2, "b": 2})
    with pytest.raises(ValueError, match="exceeds"):
        non_iid_split(train, Corpus([]), 1, 1, 3)
    with pytest.raises(ValueError, match="label 'a'"):
        non_iid_split(tiny_corpus({"a": 1}), Corpus([]), 2, 1, 1)


def test_split_test_sets_depend_only_on_labels():
    train, test = make_corpus(SyntheticSpec(labels=6, train_per_label=30, seed=2))
    for seed in (1, 2, 3):
        for row in non_iid_split(train, test, 2, 2, 3, seed=seed):
            for d in row:
                expect = [(t, d.labels.index(lab)) for t, lab in test.documents if lab in d.labels]
                assert d.test == expect


def test_split_full_label_set_like_binary_corpora():
    train, test = make_corpus(SyntheticSpec(labels=2, train_per_label=40, seed=4))
    grid = non_iid_split(train, test, 3, 2, 2, seed=0)
    for lab, parts in shares_by_label(train, grid).items():
        assert len(parts) == 6 and sum(map(len, parts)) == 40
        assert max(map(len, parts)) - min(map(len, parts)) <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_split_partition_property(seed, clients, tasks, per_task):
    train, test = make_corpus(SyntheticSpec(labels=5, train_per_label=25, test_per_label=2, seed=seed))
    grid = non_iid_split(train, test, clients, tasks, per_task, seed=seed)
    by_label = train.by_label()
    for lab, parts in shares_by_label(train, grid).items():
        assert sum(map(len, parts)) == len(set().union(*parts))  # pairwise disjoint
        assert set().union(*parts) == set(by_label[lab])
        assert max(map(len, parts)) - min(map(len, parts)) <= 1
    for row in grid:
        for d in row:
            assert len(d.labels) == per_task == len(set(d.labels))


def test_valid_is_ten_percent():
    train = tiny_corpus({"a": 50, "b": 50})
    d = non_iid_split(train, Corpus([]), 1, 1, 2, seed=3)[0][0]
    assert len(d.valid) == 10 and len(d.train) == 90


def test_grid_roundtrip(tmp_path):
    train, test = make_corpus(SyntheticSpec(labels=6, train_per_label=10, seed=0))
    grid = non_iid_split(train, test, 2, 2, 3, seed=0)
    save_grid(grid, tmp_path)
    back = load_grid(tmp_path)
    assert [[d.to_dict() for d in r] for r in back] == [[d.to_dict() for d in r] for r in grid]
    assert (tmp_path / "manifest.json").exists()
    assert TaskDataset.from_dict(grid[0][0].to_dict()) == grid[0][0]


def test_pad_batch():
    idx, lengths = pad_batch([np.array([1, 2]), np.array([3, 4, 5, 6])], 9, 3)
    assert idx.tolist() == [[1, 2, 9, 9], [3, 4, 5, 6]]
    assert lengths.tolist() == [3, 4]


def test_synthetic_prefix_makes_vocabularies_disjoint():
    a, _ = make_corpus(SyntheticSpec(labels=3, seed=0))
    b, _ = make_corpus(SyntheticSpec(labels=3, seed=0, prefix="zz"))
    va = {t for toks, _ in a.documents for t in toks}
    vb = {t for toks, _ in b.documents for t in toks}
    assert not va & vb
