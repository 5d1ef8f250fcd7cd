import numpy as np

from sidrec.synth import demo_corpus, gaussian_mixture, long_tail_catalog, planted_sid_examples


def test_fixtures_are_seeded():
    assert np.array_equal(gaussian_mixture(50, 3, seed=4), gaussian_mixture(50, 3, seed=4))
    assert not np.array_equal(gaussian_mixture(50, 3, seed=4), gaussian_mixture(50, 3, seed=5))


def test_long_tail_masses_fall_off():
    _, which = long_tail_catalog(20_000, 4, clusters=50, seed=0)
    counts = np.bincount(which, minlength=50)
    assert counts[0] > counts[9] > counts[49]


def test_planted_labels_follow_first_level():
    exs = planted_sid_examples(300, seed=1, n_items=1000)
    for e in exs:
        c1 = e.target[1][0]
        assert e.labels["ctr"] == int(any(s[0] == c1 for _, s in e.subsequence))
    rate = np.mean([e.labels["ctr"] for e in exs])
    assert 0.3 < rate < 0.7


def test_demo_corpus_split_and_ratings():
    c = demo_corpus(seed=0)
    assert {e["user_id"] for e in c["train"]}.isdisjoint(e["user_id"] for e in c["test"])
    per_user = np.bincount([r[0] for r in c["ratings"]])
    assert per_user[10] == 15 and per_user[11] >= 20
    assert all(1 <= r[2] <= 5 for r in c["ratings"])
