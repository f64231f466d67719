import struct
import threading

import numpy as np
import pytest

from derm.errors import (
    BindFailureError,
    CorruptGenerationError,
    DimInconsistentError,
)
from derm.lifecycle import (
    AggregatedStoreState,
    AggregationHeuristic,
    StoreEntry,
)
from derm.store import (
    EmbeddingClient,
    STATUS_BAD_REQUEST,
    STATUS_MISSING,
    STATUS_OK,
    StoreKey,
    generation_name,
    list_generations,
    load_generation,
    load_state,
    publish,
    save_state,
    serve,
    source_code,
)

from util import random_unit_rows


def make_state(num_users=40, num_pins=50, dim=6, seed=0, heuristic=None,
               day=9):
    rng = np.random.default_rng(seed)
    h = heuristic or AggregationHeuristic("ma", 0.8)
    entries = {}
    for i, v in enumerate(random_unit_rows(rng, num_users, dim)):
        entries[("user", i)] = StoreEntry(v, day - int(rng.integers(3)))
    for i, v in enumerate(random_unit_rows(rng, num_pins, dim)):
        entries[("pin", i)] = StoreEntry(v, day - int(rng.integers(3)))
    return AggregatedStoreState(day, h, entries)


class TestSourceCodes:
    def test_known_tags_distinct(self):
        tags = ["ctr-upstream", "cvr-upstream", "ctr-downstream",
                "cvr-downstream"]
        codes = [source_code(t) for t in tags]
        assert len(set(codes)) == len(tags)
        assert all(0 <= c <= 0xFFFF for c in codes)

    def test_stable(self):
        assert source_code("ctr-upstream") == source_code("ctr-upstream")


class TestPublishLoad:
    def test_round_trip_bit_identical(self, tmp_path):
        state = make_state()
        path, gen = publish(state, 9, "ctr-upstream", tmp_path)
        loaded = load_generation(path)
        assert loaded.day == 9
        assert len(loaded) == len(state.entries)
        for (kind, eid), entry in state.entries.items():
            key = StoreKey(kind, eid, "ctr-upstream")
            want = np.asarray(entry.vector, dtype="<f4").tobytes()
            assert loaded.lookup(key).tobytes() == want
            assert gen.lookup(key).tobytes() == want

    def test_second_publish_new_generation(self, tmp_path):
        state = make_state()
        p1, _ = publish(state, 9, "ctr-upstream", tmp_path)
        first_bytes = p1.read_bytes()
        p2, _ = publish(state, 9, "ctr-upstream", tmp_path)
        assert p1 != p2
        assert p1.name == generation_name("ctr-upstream", 9, 1)
        assert p2.name == generation_name("ctr-upstream", 9, 2)
        assert p1.read_bytes() == first_bytes  # prior generation untouched
        assert load_generation(p2).lookup(StoreKey("user", 0, "ctr-upstream")) \
            is not None

    def test_identical_content_across_attempts(self, tmp_path):
        state = make_state()
        p1, _ = publish(state, 9, "ctr-upstream", tmp_path)
        p2, _ = publish(state, 9, "ctr-upstream", tmp_path)
        # only the filename differs; payload bytes are identical
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_state(self, tmp_path):
        state = AggregatedStoreState(3, AggregationHeuristic("acc"), {})
        path, gen = publish(state, 3, "ctr-upstream", tmp_path)
        assert len(load_generation(path)) == 0

    def test_dim_inconsistent(self, tmp_path):
        state = make_state()
        state.entries[("user", 0)] = StoreEntry(np.zeros(3), 9)
        with pytest.raises(DimInconsistentError):
            publish(state, 9, "ctr-upstream", tmp_path)

    def test_absent_key_missing(self, tmp_path):
        _, gen = publish(make_state(), 9, "ctr-upstream", tmp_path)
        assert gen.lookup(StoreKey("user", 10_000, "ctr-upstream")) is None
        assert gen.lookup(StoreKey("user", 0, "cvr-upstream")) is None

    def test_bulk_keys_all_present(self, tmp_path):
        state = make_state(num_users=300, num_pins=300)
        _, gen = publish(state, 9, "ctr-upstream", tmp_path)
        missing = sum(
            1 for (kind, eid) in state.entries
            if gen.lookup(StoreKey(kind, eid, "ctr-upstream")) is None
        )
        assert missing == 0

    def test_list_generations_sorted(self, tmp_path):
        state = make_state()
        publish(state, 2, "ctr-upstream", tmp_path)
        publish(state, 1, "ctr-upstream", tmp_path)
        publish(state, 2, "ctr-upstream", tmp_path)
        gens = list_generations(tmp_path, "ctr-upstream")
        assert [(d, a) for d, a, _ in gens] == [(1, 1), (2, 1), (2, 2)]


class TestCorruption:
    def test_single_bit_flip_rejected(self, tmp_path):
        path, _ = publish(make_state(), 9, "ctr-upstream", tmp_path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 3] ^= 0x01
        bad = tmp_path / "bad.kv"
        bad.write_bytes(bytes(blob))
        with pytest.raises(CorruptGenerationError):
            load_generation(bad)

    def test_truncation_rejected(self, tmp_path):
        path, _ = publish(make_state(), 9, "ctr-upstream", tmp_path)
        bad = tmp_path / "short.kv"
        bad.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(CorruptGenerationError):
            load_generation(bad)

    def test_wrong_magic_rejected(self, tmp_path):
        path, _ = publish(make_state(), 9, "ctr-upstream", tmp_path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        bad = tmp_path / "magic.kv"
        bad.write_bytes(bytes(blob))
        with pytest.raises(CorruptGenerationError):
            load_generation(bad)


class TestStatePersistence:
    @pytest.mark.parametrize("heuristic", [
        AggregationHeuristic("ma", 0.8), AggregationHeuristic("acc"),
    ])
    def test_round_trip(self, tmp_path, heuristic):
        state = make_state(heuristic=heuristic)
        save_state(state, tmp_path, "ctr-upstream")
        loaded = load_state(tmp_path)
        assert loaded.day == state.day
        assert loaded.heuristic == state.heuristic
        assert set(loaded.entries) == set(state.entries)
        for key, entry in state.entries.items():
            got = loaded.entries[key]
            assert got.last_active_day == entry.last_active_day
            assert np.array_equal(
                got.vector, np.asarray(entry.vector, dtype="<f4").astype(np.float64)
            )

    def test_ap_buffer_round_trips(self, tmp_path):
        state = make_state(heuristic=AggregationHeuristic("ap"))
        rng = np.random.default_rng(5)
        state.prev_daily = {key: random_unit_rows(rng, 1, 6)[0]
                            for key in list(state.entries)[:10]}
        save_state(state, tmp_path, "ctr-upstream")
        loaded = load_state(tmp_path)
        assert set(loaded.prev_daily) == set(state.prev_daily)
        for key, vec in state.prev_daily.items():
            assert np.array_equal(
                loaded.prev_daily[key],
                np.asarray(vec, dtype="<f4").astype(np.float64),
            )

    def test_save_is_idempotent(self, tmp_path):
        state = make_state()
        save_state(state, tmp_path / "a", "ctr-upstream")
        save_state(state, tmp_path / "b", "ctr-upstream")
        for name in ("agg.kv", "state.json"):
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_save_load_save_stable(self, tmp_path):
        state = make_state()
        save_state(state, tmp_path / "a", "ctr-upstream")
        reloaded = load_state(tmp_path / "a")
        save_state(reloaded, tmp_path / "b", "ctr-upstream")
        assert (tmp_path / "a" / "agg.kv").read_bytes() == \
               (tmp_path / "b" / "agg.kv").read_bytes()


class TestServing:
    @pytest.fixture()
    def served(self, tmp_path):
        state = make_state()
        _, gen = publish(state, 9, "ctr-upstream", tmp_path)
        with serve(gen) as handle:
            yield state, gen, handle

    def test_present_key_ok(self, served):
        state, gen, handle = served
        host, port = handle.address
        with EmbeddingClient(host, port) as client:
            key = StoreKey("user", 3, "ctr-upstream")
            status, vec = client.request(key)
            assert status == STATUS_OK
            assert vec.tobytes() == gen.lookup(key).tobytes()

    def test_absent_key_missing(self, served):
        _, _, handle = served
        host, port = handle.address
        with EmbeddingClient(host, port) as client:
            status, vec = client.request(StoreKey("pin", 77777, "ctr-upstream"))
            assert status == STATUS_MISSING and vec is None

    def test_malformed_then_valid_on_same_connection(self, served):
        _, gen, handle = served
        host, port = handle.address
        with EmbeddingClient(host, port) as client:
            status, _ = client.request_packed(b"\x01\x02\x03")
            assert status == STATUS_BAD_REQUEST
            bad_kind = struct.pack("<BQH", 9, 1, 0)
            status, _ = client.request_packed(bad_kind)
            assert status == STATUS_BAD_REQUEST
            key = StoreKey("user", 1, "ctr-upstream")
            status, vec = client.request(key)
            assert status == STATUS_OK
            assert vec.tobytes() == gen.lookup(key).tobytes()

    def test_wire_equals_in_process_for_all_keys(self, served):
        state, gen, handle = served
        host, port = handle.address
        with EmbeddingClient(host, port) as client:
            for (kind, eid) in sorted(state.entries):
                key = StoreKey(kind, eid, "ctr-upstream")
                status, vec = client.request(key)
                assert status == STATUS_OK
                assert vec.tobytes() == gen.lookup(key).tobytes()

    def test_concurrent_readers(self, served):
        state, gen, handle = served
        host, port = handle.address
        keys = [StoreKey(kind, eid, "ctr-upstream")
                for (kind, eid) in sorted(state.entries)]
        errors = []

        def reader(offset):
            try:
                with EmbeddingClient(host, port) as client:
                    for i in range(len(keys)):
                        key = keys[(offset + i) % len(keys)]
                        status, vec = client.request(key)
                        assert status == STATUS_OK
                        assert vec.tobytes() == gen.lookup(key).tobytes()
            except Exception as e:  # surfaced after join
                errors.append(e)

        threads = [threading.Thread(target=reader, args=(i * 7,))
                   for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert not errors

    def test_bind_failure(self, served):
        _, gen, handle = served
        host, port = handle.address
        with pytest.raises(BindFailureError):
            serve(gen, (host, port))
