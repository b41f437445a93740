import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tdml.dataio import (
    Dataset,
    Record,
    generate_clusters,
    import_csv,
    load_checkpoint,
    read_embeddings,
    save_checkpoint,
    write_embeddings,
)
from tdml.errors import CheckpointError, FormatError, InvalidArgumentError
from tdml.model import ModelConfig, init_params
from tdml.reduction import pca_fit


class TestRecordDataset:
    def test_record_validation(self):
        with pytest.raises(InvalidArgumentError):
            Record("a", "x", np.ones((2, 2)))
        with pytest.raises(InvalidArgumentError):
            Record("a", "x", np.array([1.0, np.inf]))

    def test_dataset_unique_ids(self):
        recs = [Record("a", "x", np.ones(2)), Record("a", "y", np.zeros(2))]
        with pytest.raises(InvalidArgumentError, match="'a'"):
            Dataset(recs)

    def test_dataset_uniform_vectors(self):
        recs = [Record("a", "x", np.ones(2)), Record("b", "x", np.ones(3))]
        with pytest.raises(InvalidArgumentError, match="'b'"):
            Dataset(recs)

    def test_dataset_mixed_kinds_rejected(self):
        recs = [Record("a", "x", np.ones(2)), Record("b", "x", np.ones((2, 2, 1)))]
        with pytest.raises(InvalidArgumentError):
            Dataset(recs)


class TestGenerateClusters:
    def test_shapes_and_split(self):
        train, test = generate_clusters(5, 10, dim=8, separation=4.0, spread=1.0, seed=0)
        assert len(train) == 25 and len(test) == 25
        assert train.split == "train" and test.split == "test"
        assert train.label_set() == test.label_set()
        assert len({r.id for r in train.records} & {r.id for r in test.records}) == 0

    def test_uneven_split_rounds(self):
        train, test = generate_clusters(3, 10, 4, 2.0, 0.5, seed=1, split_fraction=0.8)
        per_label = {}
        for r in train.records:
            per_label[r.label] = per_label.get(r.label, 0) + 1
        assert set(per_label.values()) == {8}
        assert len(test) == 6

    def test_deterministic_per_seed(self):
        a_train, a_test = generate_clusters(4, 6, 5, 3.0, 0.7, seed=42)
        b_train, b_test = generate_clusters(4, 6, 5, 3.0, 0.7, seed=42)
        c_train, _ = generate_clusters(4, 6, 5, 3.0, 0.7, seed=43)
        for x, y in zip(a_train.records + a_test.records, b_train.records + b_test.records):
            assert x.id == y.id and x.label == y.label
            assert_array_equal(x.payload, y.payload)
        assert any(
            not np.array_equal(x.payload, y.payload)
            for x, y in zip(a_train.records, c_train.records)
        )

    def test_well_separated_clusters_classify_by_nearest_centroid(self):
        # Independent quality oracle: with separation >> spread the label
        # of every sample must be recoverable from the nearest class mean.
        train, test = generate_clusters(8, 50, dim=16, separation=10.0, spread=0.1, seed=7)
        centroids, labels = {}, sorted(train.label_set())
        for lbl in labels:
            rows = np.vstack([r.payload for r in train.records if r.label == lbl])
            centroids[lbl] = rows.mean(axis=0)
        cmat = np.vstack([centroids[lbl] for lbl in labels])
        correct = 0
        for r in test.records:
            d = ((cmat - r.payload) ** 2).sum(axis=1)
            correct += labels[int(np.argmin(d))] == r.label
        assert correct / len(test) >= 0.99

    def test_center_radius_is_separation(self):
        train, _ = generate_clusters(6, 40, dim=12, separation=5.0, spread=0.01, seed=3)
        for lbl in sorted(train.label_set()):
            rows = np.vstack([r.payload for r in train.records if r.label == lbl])
            # Class mean approximates its center; centers lie on the sphere.
            assert abs(np.linalg.norm(rows.mean(axis=0)) - 5.0) < 0.05

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            generate_clusters(1, 10, 4, 1.0, 1.0, seed=0)
        with pytest.raises(InvalidArgumentError):
            generate_clusters(3, 1, 4, 1.0, 1.0, seed=0)
        with pytest.raises(InvalidArgumentError):
            generate_clusters(3, 10, 0, 1.0, 1.0, seed=0)
        with pytest.raises(InvalidArgumentError):
            generate_clusters(3, 10, 4, -1.0, 1.0, seed=0)
        with pytest.raises(InvalidArgumentError):
            generate_clusters(3, 10, 4, 1.0, 1.0, seed=0, split_fraction=1.0)
        with pytest.raises(InvalidArgumentError):
            generate_clusters(3, 10, 4, 1.0, 1.0, seed=0, split_fraction=0.01)


class TestEmbeddingFiles:
    def triples(self, n=7, dim=5, seed=0):
        rng = np.random.default_rng(seed)
        return [(f"id{i}", f"lab{i % 3}", rng.normal(size=dim)) for i in range(n)]

    def test_round_trip_values_survive_f32(self, tmp_path):
        path = tmp_path / "e.tdml"
        recs = self.triples()
        write_embeddings(path, recs)
        back = read_embeddings(path)
        assert [(r[0], r[1]) for r in back] == [(r[0], r[1]) for r in recs]
        for (rid, lab, vec), (_, _, vec2) in zip(recs, back):
            assert_array_equal(vec2, vec.astype(np.float32).astype(np.float64))

    def test_rewrite_is_bit_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.tdml", tmp_path / "b.tdml"
        write_embeddings(p1, self.triples(seed=1))
        write_embeddings(p2, read_embeddings(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_unicode_ids_and_labels(self, tmp_path):
        path = tmp_path / "u.tdml"
        recs = [("样本-1", "лес", np.ones(3)), ("a", "лес", np.zeros(3))]
        write_embeddings(path, recs)
        back = read_embeddings(path)
        assert back[0][0] == "样本-1"
        assert back[0][1] == "лес"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tdml"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError) as err:
            read_embeddings(path)
        assert err.value.offset == 0

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "t.tdml"
        write_embeddings(path, self.triples())
        data = path.read_bytes()
        cut = tmp_path / "cut.tdml"
        cut.write_bytes(data[:-3])
        with pytest.raises(FormatError) as err:
            read_embeddings(cut)
        assert err.value.offset is not None
        assert err.value.offset <= len(data) - 3

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "g.tdml"
        write_embeddings(path, self.triples())
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            read_embeddings(path)

    def test_label_index_out_of_range(self, tmp_path):
        path = tmp_path / "li.tdml"
        write_embeddings(path, [("a", "x", np.zeros(2)), ("b", "x", np.zeros(2))])
        data = bytearray(path.read_bytes())
        # First record's label index u32 sits right after the label table:
        # 4 magic + 4 version + 4 dim + 8 count + 4 table size + (4 + 1).
        pos = 4 + 4 + 4 + 8 + 4 + 4 + 1
        data[pos : pos + 4] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="label index"):
            read_embeddings(path)

    def test_write_validation(self, tmp_path):
        path = tmp_path / "v.tdml"
        with pytest.raises(InvalidArgumentError):
            write_embeddings(path, [])
        with pytest.raises(InvalidArgumentError, match="'a'"):
            write_embeddings(path, [("a", "x", np.ones(2)), ("a", "x", np.ones(2))])
        with pytest.raises(InvalidArgumentError):
            write_embeddings(path, [("a", "x", np.ones(2)), ("b", "x", np.ones(3))])
        with pytest.raises(InvalidArgumentError, match="32-bit"):
            write_embeddings(path, [("a", "x", np.array([1e300, 0.0]))])
        assert not path.exists()  # failed writes leave nothing behind


class TestCsvImport:
    def write(self, tmp_path, text):
        p = tmp_path / "in.csv"
        p.write_text(text)
        return p

    def test_round_trip_through_binary(self, tmp_path):
        csv_path = self.write(
            tmp_path,
            "id,label,f0,f1\nq1,cat,0.5,-1.25\nq2,dog,3.0,0.125\n",
        )
        recs = import_csv(csv_path)
        assert [r[0] for r in recs] == ["q1", "q2"]
        bin_path = tmp_path / "out.tdml"
        write_embeddings(bin_path, recs)
        back = read_embeddings(bin_path)
        for (rid, lab, vec), (rid2, lab2, vec2) in zip(recs, back):
            assert (rid, lab) == (rid2, lab2)
            assert_allclose(vec2, vec, rtol=0, atol=0)  # these values are f32-exact

    def test_header_enforced(self, tmp_path):
        with pytest.raises(FormatError, match="line 1"):
            import_csv(self.write(tmp_path, "id,label,x0\na,b,1\n"))
        with pytest.raises(FormatError, match="line 1"):
            import_csv(self.write(tmp_path, "label,id,f0\na,b,1\n"))

    def test_ragged_row_names_line(self, tmp_path):
        with pytest.raises(FormatError, match="line 3"):
            import_csv(self.write(tmp_path, "id,label,f0\na,x,1\nb,x\n"))

    def test_bad_float_names_line(self, tmp_path):
        with pytest.raises(FormatError, match="line 2"):
            import_csv(self.write(tmp_path, "id,label,f0\na,x,abc\n"))

    def test_duplicate_id_names_line(self, tmp_path):
        with pytest.raises(FormatError, match="line 3"):
            import_csv(self.write(tmp_path, "id,label,f0\na,x,1\na,x,2\n"))

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="line 2"):
            import_csv(self.write(tmp_path, "id,label,f0\na,x,nan\n"))


class TestCheckpoints:
    def build(self, with_pca=False):
        config = ModelConfig("vector", input_dim=6, dense_dims=(5, 4), fc_reduction=2)
        params = init_params(config, seed=9)
        pca = None
        if with_pca:
            pca = pca_fit(np.random.default_rng(0).normal(size=(20, 4)), k=2)
        return config, params, pca

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "m.ckpt"
        config, params, _ = self.build()
        save_checkpoint(path, config, params)
        config2, params2, pca2 = load_checkpoint(path)
        assert config2 == config
        assert pca2 is None
        for name in params.keys():
            assert_array_equal(params2[name], params[name])

    def test_round_trip_with_pca(self, tmp_path):
        path = tmp_path / "mp.ckpt"
        config, params, pca = self.build(with_pca=True)
        save_checkpoint(path, config, params, pca)
        _, _, pca2 = load_checkpoint(path)
        assert_array_equal(pca2.mean, pca.mean)
        assert_array_equal(pca2.components, pca.components)
        assert_array_equal(pca2.eigenvalues, pca.eigenvalues)

    def test_save_load_save_same_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        config, params, pca = self.build(with_pca=True)
        save_checkpoint(p1, config, params, pca)
        c2, pr2, pc2 = load_checkpoint(p1)
        save_checkpoint(p2, c2, pr2, pc2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mismatched_config_rejected_on_save(self, tmp_path):
        config, params, _ = self.build()
        other = ModelConfig("vector", input_dim=7, dense_dims=(5, 4))
        with pytest.raises(InvalidArgumentError):
            save_checkpoint(tmp_path / "x.ckpt", other, params)

    def test_tampered_section_length_rejected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        config, params, _ = self.build()
        save_checkpoint(path, config, params)
        data = bytearray(path.read_bytes())
        # Low byte of the config section's u64 payload length:
        # 4 magic + 4 version + 4 section count + 2 name len + 6 "config".
        data[20] += 1
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_checkpoint_offset(self, tmp_path):
        path = tmp_path / "tr.ckpt"
        config, params, _ = self.build()
        save_checkpoint(path, config, params)
        short = path.read_bytes()[:-10]
        path.write_bytes(short)
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        # CheckpointError subclasses FormatError; truncation carries offset.
        assert isinstance(err.value, FormatError)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "bm.ckpt"
        path.write_bytes(b"WHAT" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        config, params, _ = self.build()
        save_checkpoint(path, config, params)
        data = bytearray(path.read_bytes())
        data[4] = 99  # version
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_params_inconsistent_with_config(self, tmp_path):
        # Assemble a container (per the documented layout) whose params
        # section belongs to a wider model than its config section.
        import struct

        from tdml.dataio import _config_to_json, _params_to_bytes

        config_a, _, _ = self.build()
        config_b = ModelConfig("vector", input_dim=9, dense_dims=(5, 4), fc_reduction=2)
        params_b = init_params(config_b, seed=1)
        sections = [
            (b"config", _config_to_json(config_a)),
            (b"params", _params_to_bytes(params_b)),
        ]
        buf = bytearray(b"TDCK") + struct.pack("<II", 1, len(sections))
        for name, payload in sections:
            buf += struct.pack("<H", len(name)) + name
            buf += struct.pack("<Q", len(payload)) + payload
        path = tmp_path / "mix.ckpt"
        path.write_bytes(bytes(buf))
        with pytest.raises(CheckpointError, match="inconsistent"):
            load_checkpoint(path)
