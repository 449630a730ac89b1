import json
import random
from collections import OrderedDict

import pytest

from flexkit.cache import CacheError, QueryCache, cache_key, default_cache_dir, normalize_query


class LruModel:
    """Reference LRU: an OrderedDict with the oldest entry first."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.data = OrderedDict()

    def get(self, key):
        if key not in self.data:
            return False, None
        self.data.move_to_end(key)
        return True, self.data[key]

    def put(self, key, value):
        self.data[key] = value
        self.data.move_to_end(key)
        while len(self.data) > self.capacity:
            self.data.popitem(last=False)


def test_hand_trace_capacity_two(tmp_path):
    cache = QueryCache(tmp_path, capacity=2)
    for q in ("q1", "q2", "q3"):
        cache.put(q, q.upper())
    assert cache.get("q1") == (False, None)
    assert cache.get("q2") == (True, "Q2")
    assert cache.get("q3") == (True, "Q3")


def test_get_refreshes_recency(tmp_path):
    cache = QueryCache(tmp_path, capacity=2)
    cache.put("a", 1)
    cache.put("b", 2)
    cache.get("a")
    cache.put("c", 3)
    assert cache.keys() == ["a", "c"]


def test_hundred_operation_trace_with_restarts(tmp_path):
    rng = random.Random(42)
    model = LruModel(5)
    cache = QueryCache(tmp_path, capacity=5)
    for step in range(100):
        key = f"k{rng.randrange(9)}"
        if rng.random() < 0.5:
            assert cache.get(key) == model.get(key), step
        else:
            cache.put(key, [step, key])
            model.put(key, [step, key])
        if step % 25 == 24:
            cache = QueryCache(tmp_path, capacity=5)
        assert cache.keys() == list(model.data), step


def test_survives_restart(tmp_path):
    QueryCache(tmp_path).put("k", {"x": [1.5, 2]})
    assert QueryCache(tmp_path).get("k") == (True, {"x": [1.5, 2]})


def test_two_level_fanout(tmp_path):
    cache = QueryCache(tmp_path)
    key = cache_key("fp", "query", 10)
    cache.put(key, 1)
    assert cache.entry_path(key) == tmp_path / "entries" / key[:2] / key[2:4] / f"{key}.json"
    assert cache.entry_path(key).exists()
    assert json.loads((tmp_path / "manifest.json").read_text())["order"] == [key]


def test_corrupt_entry_is_a_miss_and_dropped(tmp_path):
    cache = QueryCache(tmp_path)
    cache.put("abcdef", [1, 2, 3])
    cache.entry_path("abcdef").write_text("{not json")
    assert cache.get("abcdef") == (False, None)
    assert "abcdef" not in cache
    assert not cache.entry_path("abcdef").exists()


def test_orphan_adopted_and_dangling_dropped(tmp_path):
    cache = QueryCache(tmp_path)
    cache.put("aaaa01", "one")
    cache.put("bbbb02", "two")
    # simulate a crash after writing an entry but before the manifest update
    orphan = cache.entry_path("cccc03")
    orphan.parent.mkdir(parents=True, exist_ok=True)
    orphan.write_text(json.dumps({"key": "cccc03", "value": "three"}))
    bad = cache.entry_path("dddd04")
    bad.parent.mkdir(parents=True, exist_ok=True)
    bad.write_text("garbage")
    cache.entry_path("aaaa01").unlink()
    reopened = QueryCache(tmp_path)
    assert reopened.keys() == ["bbbb02", "cccc03"]
    assert reopened.get("cccc03") == (True, "three")
    assert not bad.exists()


def test_corrupt_manifest_rebuilt_from_entries(tmp_path):
    cache = QueryCache(tmp_path)
    cache.put("aaaa01", 1)
    (tmp_path / "manifest.json").write_text("{{{")
    assert QueryCache(tmp_path).get("aaaa01") == (True, 1)


def test_shrinking_capacity_evicts_on_open(tmp_path):
    cache = QueryCache(tmp_path, capacity=4)
    for k in ("a1", "b2", "c3", "d4"):
        cache.put(k, k)
    assert QueryCache(tmp_path, capacity=2).keys() == ["c3", "d4"]


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(CacheError):
        QueryCache(blocker / "cache")


def test_query_normalization():
    assert normalize_query("  Café   au  lait ") == "Café au lait"
    assert cache_key("fp", " a  b ", 10) == cache_key("fp", "a b", 10)
    assert cache_key("fp", "A b", 10) != cache_key("fp", "a b", 10)
    assert cache_key("fp", "a", 10) != cache_key("fp", "a", 11)
    assert cache_key("fp1", "a", 10) != cache_key("fp2", "a", 10)
    assert len(cache_key("fp", "a", 1)) == 32


def test_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("FLEXKIT_CACHE_DIR", str(tmp_path / "envcache"))
    assert default_cache_dir() == tmp_path / "envcache"
    QueryCache().put("k", 1)
    assert (tmp_path / "envcache" / "manifest.json").exists()


def test_threads_share_cache(tmp_path):
    from concurrent.futures import ThreadPoolExecutor

    cache = QueryCache(tmp_path, capacity=1000)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda i: cache.put(f"key{i:03d}", i), range(100)))
    assert len(cache) == 100
    assert all(cache.get(f"key{i:03d}") == (True, i) for i in range(100))
