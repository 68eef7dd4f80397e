import hashlib
import json
import warnings

import numpy as np
import pytest
from scipy.stats import binom

from ogan.ontology import Ontology, parent_of
from ogan.synthdata import (
    DatasetError,
    DatasetSpec,
    ManifestDataset,
    example_seed,
    generate_dataset,
    load_dataset,
    nearest_template_classify,
    render_example,
    template_text,
)


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    ont = Ontology(("TOPS", "BOTTOMS", "OUTERWEAR"),
                   (("tshirt", 0), ("hoodie", 0), ("jeans", 1), ("skirt", 1), ("bomber", 2), ("parka", 2)))
    out = tmp_path_factory.mktemp("data")
    counts = generate_dataset(DatasetSpec(ont, 60, resolution=16, seed=3), out)
    return ont, out, counts


def test_manifest_shape(small_data):
    ont, out, counts = small_data
    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 60 and sum(counts.values()) == 60
    rec = json.loads(lines[0])
    assert set(rec) == {"file", "sub", "main", "text"}
    assert rec["main"] == parent_of(ont, rec["sub"])
    assert ont.sub_names[rec["sub"]] in rec["text"]


def test_loader_round_trip(small_data):
    ont, out, _ = small_data
    ds = ManifestDataset(out / "manifest.jsonl")
    assert ds.ontology == ont and ds.resolution == 16
    imgs = ds.float_images(np.arange(len(ds)))
    assert imgs.min() >= -1.0 and imgs.max() <= 1.0
    seen = np.concatenate([b.sub for b in load_dataset(out / "manifest.jsonl", batch_size=7, seed=1)])
    assert sorted(seen.tolist()) == sorted(ds.sub.tolist())


def test_png_matches_render(small_data):
    ont, out, _ = small_data
    ds = ManifestDataset(out / "manifest.jsonl")
    ex = render_example(DatasetSpec(ont, 60, resolution=16, seed=3), example_seed(3, 5))
    assert ex.sub_index == ds.sub[5] and ex.text == ds.texts[5]
    assert np.abs(ds.float_images(5) - ex.image).max() <= 1.0 / 127.5 + 1e-6


def test_generation_byte_identical(tmp_path, tiny_ontology):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(DatasetSpec(tiny_ontology, 20, resolution=8, seed=9), a)
    generate_dataset(DatasetSpec(tiny_ontology, 20, resolution=8, seed=9), b)
    assert tree_hash(a) == tree_hash(b)


def test_class_balance_binomial(ontology):
    # three-way label draw: counts must fall inside [800, 1200] out of 3000
    ont = Ontology(("A", "B"), (("x", 0), ("y", 0), ("z", 1)))
    spec = DatasetSpec(ont, 3000, resolution=4, seed=0)
    counts = np.bincount([render_example(spec, example_seed(0, i)).sub_index for i in range(3000)],
                         minlength=3)
    assert binom.cdf(799, 3000, 1 / 3) < 1e-9  # the band is far outside sampling noise
    assert all(800 <= c <= 1200 for c in counts), counts


def test_template_variety(ontology):
    texts = {template_text(ontology, 0, "red", "solid", s) for s in range(64)}
    assert len(texts) >= 4


def test_nearest_template_accuracy(ontology):
    spec = DatasetSpec(ontology, 1000, resolution=32, seed=11)
    exs = [render_example(spec, example_seed(11, i)) for i in range(1000)]
    pred = nearest_template_classify(np.stack([e.image for e in exs]), ontology)
    acc = float((pred == np.array([e.sub_index for e in exs])).mean())
    assert acc >= 0.99


@pytest.mark.parametrize("res", [3, 12, 128])
def test_bad_resolution(ontology, res):
    with pytest.raises(DatasetError):
        DatasetSpec(ontology, 10, resolution=res)


def test_lonely_main_warns():
    ont = Ontology(("A", "B"), (("x", 0), ("y", 0), ("z", 1)))
    with pytest.warns(UserWarning, match="fewer than 2"):
        DatasetSpec(ont, 10, resolution=8)


def test_missing_image_is_error(tmp_path, tiny_ontology):
    generate_dataset(DatasetSpec(tiny_ontology, 4, resolution=8, seed=0), tmp_path)
    (tmp_path / "img" / "000002.png").unlink()
    with pytest.raises(DatasetError, match="missing image"):
        ManifestDataset(tmp_path / "manifest.jsonl")


def test_corrupt_image_is_error(tmp_path, tiny_ontology):
    generate_dataset(DatasetSpec(tiny_ontology, 4, resolution=8, seed=0), tmp_path)
    (tmp_path / "img" / "000001.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="corrupt"):
        ManifestDataset(tmp_path / "manifest.jsonl")


def test_permutation_is_per_epoch(small_data):
    _, out, _ = small_data
    ds = ManifestDataset(out / "manifest.jsonl")
    p0, p0b, p1 = ds.permutation(1, 0), ds.permutation(1, 0), ds.permutation(1, 1)
    np.testing.assert_array_equal(p0, p0b)
    assert not np.array_equal(p0, p1)
