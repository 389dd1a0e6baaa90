import threading

import numpy as np
import pytest

from protobank.bank import (
    BankClient,
    BankStore,
    assemble,
    bank_service,
    extract_prototypes,
    kmeans,
    random_bank,
)
from protobank.container import MemoryBank, PrototypeSet, deserialize, serialize
from protobank.errors import DataError, FormatError, NumericError
from tests.test_pretrain import separable_dataset


def reference_lloyd(points, k, rng, iters=60):
    """Independent plain Lloyd restart used as a brute-force oracle."""
    centroids = points[rng.choice(len(points), size=k, replace=False)]
    for _ in range(iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new = centroids.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
        if np.allclose(new, centroids):
            break
        centroids = new
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.min(axis=1).sum()


class TestKMeans:
    def test_two_points_two_clusters(self):
        res = kmeans(np.array([[0.0], [10.0]]), 2, seed=0)
        assert sorted(res.centroids.ravel().tolist()) == [0.0, 10.0]
        assert res.objective == 0.0

    def test_k1_is_global_mean(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 3))
        res = kmeans(pts, 1, seed=0)
        assert np.allclose(res.centroids[0], pts.mean(axis=0), atol=1e-12)

    def test_k_clamped_to_n(self):
        pts = np.array([[0.0], [1.0], [2.0]])
        res = kmeans(pts, 10, seed=0)
        assert res.centroids.shape == (3, 1)
        assert res.objective == 0.0

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            pts = rng.normal(size=(int(rng.integers(10, 60)), int(rng.integers(1, 4))))
            res = kmeans(pts, int(rng.integers(2, 5)), seed=trial)
            hist = res.objective_history
            assert all(a >= b - 1e-9 for a, b in zip(hist, hist[1:]))

    def test_centroids_equal_assigned_means(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(40, 2))
        res = kmeans(pts, 4, seed=0)
        for c in range(4):
            members = pts[res.assignments == c]
            assert len(members) > 0
            assert np.allclose(res.centroids[c], members.mean(axis=0), atol=1e-9)

    def test_duplicate_points_and_empty_cluster_repair(self):
        pts = np.vstack([np.zeros((5, 2)), np.ones((2, 2)) * 9])
        res = kmeans(pts, 3, seed=0)
        assert len(np.unique(res.assignments)) == 3

    def test_close_to_bruteforce_oracle(self):
        rng = np.random.default_rng(3)
        for trial in range(5):
            n = int(rng.integers(10, 50))
            d = int(rng.integers(1, 4))
            k = int(rng.integers(2, 4))
            pts = rng.normal(size=(n, d))
            ours = kmeans(pts, k, seed=trial).objective
            oracle = min(reference_lloyd(pts, k, rng) for _ in range(100))
            assert ours <= oracle * 1.05 + 1e-9

    def test_bad_inputs(self):
        with pytest.raises(NumericError):
            kmeans(np.array([[np.inf]]), 1, seed=0)
        with pytest.raises(DataError):
            kmeans(np.zeros((0, 2)), 1, seed=0)
        with pytest.raises(DataError):
            kmeans(np.zeros((3, 2)), 0, seed=0)


class TestExtractPrototypes:
    def setup_method(self):
        from protobank.pretrain import PretrainConfig, pretrain
        from protobank.declarations import SplitSpec, split
        from protobank.encoder import EncoderConfig

        ds = separable_dataset(n=200)
        parts = split(ds, SplitSpec(15, 10))
        cfg = PretrainConfig(epochs=2, batch_size=32, seed=0, encoder=EncoderConfig(k=4, d=8, n_kernels=2))
        self.params, _ = pretrain(parts["train"], parts["valid"], cfg)
        self.train = parts["train"]

    def test_clamping_to_class_counts(self):
        proto = extract_prototypes(self.params, self.train, per_class=500, seed=0)
        y = np.array([1 if r.illicit else 0 for r in self.train.records])
        assert proto.fraud_prototypes.shape == (int(y.sum()), 8)
        assert proto.nonfraud_prototypes.shape == (int((1 - y).sum()), 8)

    def test_k_equals_n_returns_permutation_of_embeddings(self):
        from protobank.encoder import embed_matrix

        proto = extract_prototypes(self.params, self.train, per_class=10**6, seed=0)
        h = embed_matrix(self.params, self.train.records)
        y = np.array([bool(r.illicit) for r in self.train.records])
        fraud_rows = {tuple(np.round(r, 9)) for r in h[y]}
        proto_rows = {tuple(np.round(r, 9)) for r in proto.fraud_prototypes}
        assert proto_rows == fraud_rows

    def test_prototypes_carry_no_record_fields(self):
        proto = extract_prototypes(self.params, self.train, per_class=5, seed=0)
        assert proto.fraud_prototypes.dtype == np.float64
        assert proto.fraud_prototypes.shape[1] == self.params.config.d
        # container round-trip carries only the matrices and source metadata
        fields = set(vars(proto))
        assert fields == {
            "source_id", "dim", "fraud_prototypes", "nonfraud_prototypes",
            "created_at", "format_version",
        }

    def test_order_invariance_via_dataset_normalization(self):
        proto_a = extract_prototypes(self.params, self.train, per_class=7, seed=3)
        from protobank.declarations import CountryDataset

        shuffled = CountryDataset.build(
            self.train.country_id,
            list(reversed(self.train.records)),
            dict(self.train.sealed),
        )
        proto_b = extract_prototypes(self.params, shuffled, per_class=7, seed=3)
        assert np.array_equal(proto_a.fraud_prototypes, proto_b.fraud_prototypes)
        assert np.array_equal(proto_a.nonfraud_prototypes, proto_b.nonfraud_prototypes)

    def test_missing_class_rejected(self):
        clean = self.train.subset(lambda r: not r.illicit)
        with pytest.raises(DataError):
            extract_prototypes(self.params, clean, per_class=5, seed=0)


class TestAssembleAndRandomBank:
    def _proto(self, sid, dim=4, nf=3, nn=2, seed=0):
        rng = np.random.default_rng(seed)
        return PrototypeSet(sid, dim, rng.normal(size=(nf, dim)), rng.normal(size=(nn, dim)))

    def test_empty_bank(self):
        bank = assemble([])
        assert len(bank) == 0
        assert bank.dim is None

    def test_row_counting_and_order(self):
        a = self._proto("A", nf=10, nn=10, seed=1)
        b = self._proto("B", nf=5, nn=5, seed=2)
        bank = assemble([a, b])
        assert len(bank) == 30
        mat = bank.matrix()
        assert np.array_equal(mat[:10], a.fraud_prototypes)
        assert np.array_equal(mat[10:20], a.nonfraud_prototypes)
        assert np.array_equal(mat[20:25], b.fraud_prototypes)

    def test_dim_mismatch_and_duplicates(self):
        with pytest.raises(DataError):
            assemble([self._proto("A", dim=4), self._proto("B", dim=5)])
        with pytest.raises(DataError):
            assemble([self._proto("A"), self._proto("A", seed=9)])

    def test_random_bank_deterministic_and_normalized(self):
        a = random_bank(32, 1000, seed=5)
        b = random_bank(32, 1000, seed=5)
        assert a == b
        assert a.fraud_prototypes.shape == (500, 32)
        assert a.nonfraud_prototypes.shape == (500, 32)
        norms = np.linalg.norm(a.rows(), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-12)

    def test_random_bank_too_small(self):
        with pytest.raises(DataError):
            random_bank(4, 1, seed=0)


class TestSerialization:
    def _proto(self, sid="XX", dim=4, nf=3, nn=2, seed=0, created_at=123):
        rng = np.random.default_rng(seed)
        return PrototypeSet(
            sid, dim, rng.normal(size=(nf, dim)), rng.normal(size=(nn, dim)), created_at
        )

    def test_round_trip_prototype_set(self):
        ps = self._proto()
        blob = serialize(ps)
        again = deserialize(blob)
        assert again == ps
        assert serialize(again) == blob

    def test_round_trip_memory_bank(self):
        bank = assemble([self._proto("A"), self._proto("B", seed=1)])
        blob = serialize(bank)
        assert deserialize(blob) == bank

    def test_empty_bank_round_trip(self):
        blob = serialize(MemoryBank())
        again = deserialize(blob)
        assert isinstance(again, MemoryBank)
        assert len(again) == 0

    def test_every_single_byte_flip_rejected(self):
        blob = bytearray(serialize(self._proto(nf=2, nn=1)))
        for pos in range(len(blob)):
            corrupted = bytearray(blob)
            corrupted[pos] ^= 0xFF
            with pytest.raises(FormatError):
                deserialize(bytes(corrupted))

    def test_truncation_rejected(self):
        blob = serialize(self._proto())
        for cut in (0, 4, 8, len(blob) // 2, len(blob) - 1):
            with pytest.raises(FormatError):
                deserialize(blob[:cut])

    def test_bad_magic_rejected(self):
        with pytest.raises(FormatError):
            deserialize(b"NOTMAGIC" + b"\0" * 32)


class TestBankService:
    @pytest.fixture()
    def server(self, tmp_path):
        srv = bank_service(tmp_path / "store")
        srv.serve_background()
        yield srv
        srv.shutdown()
        srv.server_close()

    def _proto(self, sid, seed=0):
        rng = np.random.default_rng(seed)
        return PrototypeSet(sid, 6, rng.normal(size=(4, 6)), rng.normal(size=(3, 6)), 42)

    def test_put_get_byte_identity(self, server):
        blob = serialize(self._proto("AA"))
        with BankClient(server.address) as client:
            client.put(blob)
            assert client.get(["AA"]) == [blob]

    def test_get_unknown_id(self, server):
        with BankClient(server.address) as client:
            with pytest.raises(DataError, match="unknown source_id"):
                client.get(["nope"])

    def test_list_and_replace(self, server):
        with BankClient(server.address) as client:
            client.put(self._proto("AA", seed=1))
            client.put(self._proto("BB", seed=2))
            assert client.list() == [("AA", 42), ("BB", 42)]
            replacement = serialize(self._proto("AA", seed=9))
            client.put(replacement)
            assert client.get(["AA"]) == [replacement]

    def test_malformed_upload_rejected_before_storage(self, server, tmp_path):
        with BankClient(server.address) as client:
            with pytest.raises(DataError):
                client.put(b"garbage bytes")
            assert client.list() == []

    def test_concurrent_puts_distinct_ids(self, server):
        blobs = {f"C{i}": serialize(self._proto(f"C{i}", seed=i)) for i in range(8)}
        errors = []

        def worker(sid):
            try:
                with BankClient(server.address) as client:
                    client.put(blobs[sid])
                    got = client.get([sid])
                    assert got == [blobs[sid]]
            except Exception as e:  # noqa: BLE001 - collected for the main thread
                errors.append(e)

        threads = [threading.Thread(target=worker, args=(sid,)) for sid in blobs]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        with BankClient(server.address) as client:
            for sid, blob in blobs.items():
                assert client.get([sid]) == [blob]


class TestBankStore:
    def test_atomic_replace_and_safe_ids(self, tmp_path):
        store = BankStore(tmp_path)
        rng = np.random.default_rng(0)
        ps = PrototypeSet("ok-id_1.x", 3, rng.normal(size=(1, 3)), rng.normal(size=(1, 3)))
        store.put(serialize(ps))
        assert store.get("ok-id_1.x") == serialize(ps)
        bad = PrototypeSet("../evil", 3, rng.normal(size=(1, 3)), rng.normal(size=(1, 3)))
        with pytest.raises(DataError):
            store.put(serialize(bad))
