import pytest

from sidrec.gsu import Event, UserSequence
from sidrec.records import (example_from_record, example_to_record, read_sequences, read_sids,
                            write_jsonl, write_sequences, write_sids)


def test_sids_roundtrip(tmp_path):
    write_sids(tmp_path / "s.jsonl", [3, 1], [(1, 2, 3), (4, 5, 6)])
    assert read_sids(tmp_path / "s.jsonl") == {3: (1, 2, 3), 1: (4, 5, 6)}


def test_sequences_roundtrip(tmp_path):
    seqs = [UserSequence(1, [Event(5, 1.0, ("click",)), Event(6, 2.0, ("click", "order"))], [7])]
    write_sequences(tmp_path / "q.jsonl", seqs)
    back = read_sequences(tmp_path / "q.jsonl")
    assert back[0].events == seqs[0].events and back[0].future == [7]


def test_example_sid_join():
    sids = {1: (0, 1, 2), 2: (3, 4, 5)}
    ex = example_from_record({"target": 1, "subsequence": [2, {"item_id": 9, "sid": [1, 1, 1]}],
                              "labels": {"ctr": 1}, "user_id": 4}, sids)
    assert ex.target == (1, (0, 1, 2))
    assert ex.subsequence == [(2, (3, 4, 5)), (9, (1, 1, 1))]
    assert example_from_record(example_to_record(ex)).subsequence == ex.subsequence
    with pytest.raises(KeyError):
        example_from_record({"target": 8, "labels": {"ctr": 0}}, sids)


def test_bad_json_line(tmp_path):
    (tmp_path / "s.jsonl").write_text('{"item_id": 1, "sid": [1,2,3]}\n{oops\n')
    with pytest.raises(ValueError, match=":2:"):
        read_sids(tmp_path / "s.jsonl")
    write_jsonl(tmp_path / "w.jsonl", [{"b": 1, "a": 2}])
    assert (tmp_path / "w.jsonl").read_text() == '{"a": 2, "b": 1}\n'
