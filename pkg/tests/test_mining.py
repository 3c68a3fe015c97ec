import numpy as np
import pytest

from pssl.logs import Behavior, QueryEvent, UserHistory, build_history, sessionize
from pssl.mining import (BEHAVIOR_DELETE, BEHAVIOR_REORDER, DP, QP, SAP, SESSION_DELETE, UP,
                         BatchStream, augment_sequence, behavior_multiset, build_pretrain_batches,
                         mine_document_pairs, mine_query_pairs, mine_sap_instances,
                         mine_user_pairs, read_pairs, write_pairs)

from oracles import (brute_doc_pairs, brute_query_pairs, brute_user_pairs, entropy_bits,
                     random_log)


def dp_set(pairs):
    return {(p.user_id, p.query, frozenset((p.doc_i, p.doc_j))) for p in pairs}


def qp_set(pairs):
    return {(p.user_id, frozenset((p.query_i, p.query_j)), p.shared_doc) for p in pairs}


def up_set(pairs):
    return {(frozenset((p.user_i, p.user_j)), p.query, p.shared_doc) for p in pairs}


@pytest.mark.parametrize("seed", range(10))
def test_miners_match_brute_force(seed):
    events = random_log(np.random.default_rng(seed), max_events=150)
    assert dp_set(mine_document_pairs(events)) == brute_doc_pairs(events)
    assert qp_set(mine_query_pairs(events)) == brute_query_pairs(events)
    assert up_set(mine_user_pairs(events)) == brute_user_pairs(events)


def test_user_pairs_anchor_and_history_contract():
    events = random_log(np.random.default_rng(42))
    pairs = mine_user_pairs(events)
    assert pairs
    for p in pairs:
        assert entropy_bits(p.query, events) > 1.0
        for user, idx, view in ((p.user_i, p.index_i, p.history_i), (p.user_j, p.index_j, p.history_j)):
            anchor = events[user][idx]
            assert anchor.query == p.query and p.shared_doc in anchor.clicked
            assert all(b.timestamp < anchor.timestamp for b in view.long_term + view.short_term)
            earlier = [e for e in events[user][:idx] if e.query == p.query and p.shared_doc in e.clicked]
            assert not earlier


def test_user_pairs_respect_threshold_exactly():
    # q has entropy exactly 1.0 bit: excluded at threshold 1.0, included below it
    evs = sessionize({
        "a": [QueryEvent("a", 1, "q", (("x", 1), ("y", 2)), (("x", None),))],
        "b": [QueryEvent("b", 2, "q", (("x", 1), ("y", 2)), (("x", None),))],
        "c": [QueryEvent("c", 3, "q", (("x", 1), ("y", 2)), (("y", None),)),
              QueryEvent("c", 4, "q", (("x", 1), ("y", 2)), (("y", None),))],
    })
    assert entropy_bits("q", evs) == pytest.approx(1.0)
    assert mine_user_pairs(evs, 1.0) == []
    assert up_set(mine_user_pairs(evs, 0.5)) == {(frozenset("ab"), "q", "x")}


def test_query_pairs_need_distinct_query_strings():
    evs = {"u": [QueryEvent("u", t, "same", (("d", 1),), (("d", None),)) for t in range(3)]}
    assert mine_query_pairs(evs) == []


def make_history(sessions):
    bs = []
    t = 0
    for s, size in enumerate(sessions):
        for k in range(size):
            t += 1
            bs.append(Behavior("query" if k % 2 == 0 else "click", f"s{s}b{k}", t, s))
    return UserHistory("u", tuple(bs))


def is_subsequence(sub, full):
    it = iter(full)
    return all(any(x == y for y in it) for x in sub)


def test_behavior_delete_contract():
    rng = np.random.default_rng(0)
    for i in range(200):
        h = make_history(list(rng.integers(1, 6, size=rng.integers(1, 5))))
        out = augment_sequence(h, BEHAVIOR_DELETE, 0.5, seed=i)
        n = len(h)
        assert len(out) == n - n // 2
        assert is_subsequence(out.behaviors, h.behaviors)


def test_behavior_reorder_preserves_multiset_and_session_labels():
    rng = np.random.default_rng(1)
    for i in range(200):
        h = make_history(list(rng.integers(1, 6, size=rng.integers(1, 5))))
        out = augment_sequence(h, BEHAVIOR_REORDER, 0.5, seed=i)
        assert behavior_multiset(out.behaviors) == behavior_multiset(h.behaviors)
        assert [b.session_id for b in out.behaviors] == [b.session_id for b in h.behaviors]


def test_session_delete_removes_whole_sessions_only():
    rng = np.random.default_rng(2)
    for i in range(200):
        h = make_history(list(rng.integers(1, 6, size=rng.integers(1, 5))))
        out = augment_sequence(h, SESSION_DELETE, 0.5, seed=i)
        kept = {b.session_id for b in out.behaviors}
        assert kept
        assert out.behaviors == tuple(b for b in h.behaviors if b.session_id in kept)


def test_augmentation_is_seed_deterministic_and_validates():
    h = make_history([3, 4, 2])
    for s in (BEHAVIOR_DELETE, BEHAVIOR_REORDER, SESSION_DELETE):
        assert augment_sequence(h, s, 0.5, seed=7) == augment_sequence(h, s, 0.5, seed=7)
    with pytest.raises(ValueError):
        augment_sequence(h, "crop", 0.5, seed=0)
    with pytest.raises(ValueError):
        augment_sequence(UserHistory("u", ()), BEHAVIOR_DELETE)


def test_sap_instances_cap_history_length():
    events = random_log(np.random.default_rng(3))
    inst = mine_sap_instances(events, seed=0, max_behaviors=10)
    assert len(inst) == len(events)
    for x in inst:
        full = build_history(x.user_id, events[x.user_id]).behaviors
        assert x.history.behaviors == full[-10:]


def test_batch_negatives_pool_sizes():
    events = random_log(np.random.default_rng(4))
    batch = build_pretrain_batches(mine_document_pairs(events), 4, seed=0)[0]
    assert len(batch.negatives(0)) == 6
    assert len(batch.negatives(0, "one")) == 3
    assert ("a", 0) not in batch.negatives(0) and ("b", 0) not in batch.negatives(0)


def test_batches_drop_remainder_and_skip_small_tasks(caplog):
    items = list(range(10))
    batches = build_pretrain_batches(items, 4)
    assert [len(b) for b in batches] == [4, 4]
    assert len({x for b in batches for x in b.items}) == 8
    assert build_pretrain_batches(items[:3], 4) == []
    assert "fewer than batch size" in caplog.text


def test_batch_stream_reshuffles_each_epoch_and_is_reproducible():
    s1 = BatchStream(DP, list(range(12)), 4, seed=5)
    s2 = BatchStream(DP, list(range(12)), 4, seed=5)
    assert [b.items for b in s1.epoch_batches(0)] == [b.items for b in s2.epoch_batches(0)]
    assert [b.items for b in s1.epoch_batches(0)] != [b.items for b in s1.epoch_batches(1)]


def test_sap_stream_first_epoch_uses_instance_strategies():
    events = random_log(np.random.default_rng(6))
    inst = mine_sap_instances(events, seed=1)
    stream = BatchStream(SAP, inst, 2, seed=0)
    batch = stream.epoch_batches(0)[0]
    for x, (a, b) in zip(batch.items, batch.augmented):
        assert a == augment_sequence(x.history, x.strategy_i, 0.5, x.seed_i)
        assert b == augment_sequence(x.history, x.strategy_j, 0.5, x.seed_j)


@pytest.mark.parametrize("task", [DP, QP, UP, SAP])
def test_pair_files_roundtrip(tmp_path, task):
    events = random_log(np.random.default_rng(8))
    mined = {DP: mine_document_pairs, QP: mine_query_pairs, UP: mine_user_pairs,
             SAP: mine_sap_instances}[task](events)
    path = tmp_path / f"{task}.tsv"
    write_pairs(path, task, mined)
    assert read_pairs(path, task, events) == mined


def test_read_pairs_needs_events_for_history_tasks(tmp_path):
    write_pairs(tmp_path / "up.tsv", UP, [])
    with pytest.raises(ValueError):
        read_pairs(tmp_path / "up.tsv", UP)
    with pytest.raises(ValueError):
        read_pairs(tmp_path / "up.tsv", DP)
