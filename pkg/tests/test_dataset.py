import io
import json

import numpy as np
import pytest

from atlmetric.dataset import (
    Dataset,
    DatasetFormatError,
    DomainShiftConfig,
    ProductRecord,
    SyntheticConfig,
    apply_domain_shift,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_products,
)
from atlmetric.text_semantics import MarginConfig, MarginTable, embed_description

SMALL = SyntheticConfig(num_products=40, images_per_product=3, vocab_size=12, attrs_per_product=3,
                        feature_dim=10, prototype_noise_sigma=0.2, seed=5, word_dim=6)


def pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=2)


class TestSynthetic:
    def test_deterministic(self):
        a, ta = generate_synthetic(SMALL)
        b, tb = generate_synthetic(SMALL)
        assert a.equals(b)
        assert all(ta[t].tobytes() == tb[t].tobytes() for t in ta.tokens())

    def test_zero_noise_images_identical(self):
        ds, _ = generate_synthetic(SyntheticConfig(**{**SMALL.__dict__, "prototype_noise_sigma": 0.0}))
        for rec in ds.records:
            assert np.all(rec.images == rec.images[0])

    def test_shared_attributes_share_embedding_and_margin(self):
        cfg = SyntheticConfig(num_products=60, images_per_product=2, vocab_size=4,
                              attrs_per_product=3, feature_dim=8, prototype_noise_sigma=0.0, seed=1)
        ds, table = generate_synthetic(cfg)
        by_desc = {}
        for j, d in enumerate(ds.descriptions):
            by_desc.setdefault(d, []).append(j)
        i, j = next(v for v in by_desc.values() if len(v) > 1)[:2]
        gi = embed_description(ds.descriptions[i], table)
        gj = embed_description(ds.descriptions[j], table)
        assert gi.tobytes() == gj.tobytes()
        assert MarginTable(ds.descriptions, table, MarginConfig(0.1)).margin(i, j) == 0.1
        assert ds.records[i].images.tobytes() == ds.records[j].images.tobytes()

    def test_shapes_and_tokens(self):
        ds, table = generate_synthetic(SMALL)
        assert len(ds) == 40 and ds.num_images == 120 and ds.d_in == 10
        assert table.dim == 6
        for d in ds.descriptions:
            assert len(set(d)) == 3 and all(t in table for t in d)

    def test_text_and_feature_similarity_agree(self):
        cfg = SyntheticConfig(num_products=30, vocab_size=20, attrs_per_product=3,
                              feature_dim=16, prototype_noise_sigma=0.0, seed=2, word_dim=8)
        ds, table = generate_synthetic(cfg)
        g = np.stack([embed_description(d, table) for d in ds.descriptions])
        protos = np.stack([r.images[0] for r in ds.records])
        np.testing.assert_allclose(pairwise(protos), pairwise(g), atol=1e-12)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SyntheticConfig(vocab_size=2, attrs_per_product=3)
        with pytest.raises(ValueError):
            SyntheticConfig(prototype_noise_sigma=-1.0)


class TestDomainShift:
    def test_identity(self):
        ds, _ = generate_synthetic(SMALL)
        assert apply_domain_shift(ds, DomainShiftConfig()).equals(ds)

    def test_rotation_is_isometry(self):
        ds, _ = generate_synthetic(SMALL)
        shifted = apply_domain_shift(ds, DomainShiftConfig(rotation_seed=4, rotation_strength=1.0))
        assert not np.allclose(shifted.image_matrix, ds.image_matrix)
        np.testing.assert_allclose(pairwise(shifted.image_matrix), pairwise(ds.image_matrix), atol=1e-9)

    def test_keeps_ids_descriptions_and_invariants(self):
        ds, _ = generate_synthetic(SMALL)
        shifted = apply_domain_shift(ds, DomainShiftConfig(1, 0.3, 0.5, 0.2))
        assert shifted.product_ids == ds.product_ids
        assert shifted.descriptions == ds.descriptions
        assert shifted.image_matrix.shape == ds.image_matrix.shape
        assert np.all(np.isfinite(shifted.image_matrix))


class TestIO:
    def test_roundtrip_exact(self):
        ds, _ = generate_synthetic(SMALL)
        buf = io.StringIO()
        save_dataset(ds, buf)
        assert load_dataset(io.StringIO(buf.getvalue())).equals(ds)

    def line(self, pid="a", desc=("x",), images=((1.0, 2.0),)):
        return json.dumps({"product_id": pid, "description": list(desc),
                           "images": [list(i) for i in images]}) + "\n"

    def test_duplicate_id_named(self):
        src = io.StringIO(self.line("a") + self.line("b") + self.line("a"))
        with pytest.raises(DatasetFormatError, match="'a'"):
            load_dataset(src)

    def test_zero_images(self):
        with pytest.raises(DatasetFormatError, match="no images"):
            load_dataset(io.StringIO(self.line(images=())))

    def test_dimension_mismatch(self):
        src = io.StringIO(self.line("a") + self.line("b", images=((1.0, 2.0, 3.0),)))
        with pytest.raises(DatasetFormatError, match="record 1"):
            load_dataset(src)

    def test_bad_json_has_record_index(self):
        with pytest.raises(DatasetFormatError, match="record 1"):
            load_dataset(io.StringIO(self.line("a") + "{not json\n"))

    def test_nonfinite_rejected(self):
        with pytest.raises(DatasetFormatError):
            Dataset([ProductRecord("a", ("x",), np.array([[np.nan, 1.0]]))])


def test_split_is_disjoint_and_complete():
    ds, _ = generate_synthetic(SMALL)
    a, b = split_products(ds, 25, seed=1)
    assert len(a) == 25 and len(b) == 15
    assert set(a.product_ids).isdisjoint(b.product_ids)
    assert set(a.product_ids) | set(b.product_ids) == set(ds.product_ids)
