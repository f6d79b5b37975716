import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from nssl import augment as A
from nssl import dataio as D
from nssl.errors import FormatError, ValidationError


def rand_image(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3)).astype(np.float32) / 255


def test_extract_center_window():
    img = rand_image(100, 100)
    p = D.extract_patch(img, (50, 50))
    assert p.shape == (60, 60, 3)
    np.testing.assert_array_equal(p, img[20:80, 20:80])


def test_extract_near_border_excluded():
    img = rand_image(100, 100)
    with pytest.raises(D.Excluded):
        D.extract_patch(img, (10, 50))
    with pytest.raises(D.Excluded):
        D.extract_patch(img, (50, 95))


def test_extract_then_rotate_crop_equals_direct_40():
    img = rand_image(120, 90, seed=1)
    for c in [(45, 60), (31, 40), (58.4, 80.6)]:
        via = A.rotate_crop(D.extract_patch(img, c), 0.0)
        np.testing.assert_array_equal(via, D.extract_patch(img, c, 40))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_window_is_exact_copy_at_offset(seed):
    r = np.random.default_rng(seed)
    img = rand_image(80, 90, seed % 97)
    cx, cy = r.uniform(30, 60), r.uniform(30, 50)
    x0, y0 = D.window_origin((cx, cy), 60)
    np.testing.assert_array_equal(D.extract_patch(img, (cx, cy)), img[y0:y0 + 60, x0:x0 + 60])


@pytest.fixture
def dataset(tmp_path):
    img = (rand_image(100, 120, seed=2) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "a.png")
    Image.fromarray(img[:, ::-1].copy()).save(tmp_path / "b.png")
    text = "\n".join([
        "# toy manifest",
        "cell_id,image_path,centroid_x,centroid_y,slide_id,organ,label",
        "c1,a.png,50,50,s1,lung,tumor",
        "c2,a.png,5,50,s1,lung,immune",
        "c3,b.png,60,40,s2,breast,tumor",
        "",
        "c4,b.png,89,69,s2,breast,stroma",
        "c5,b.png,91,50,s2,breast,stroma",
    ]) + "\n"
    (tmp_path / "m.csv").write_text(text)
    return tmp_path, img


def test_manifest_parse_and_resolve(dataset):
    root, _ = dataset
    m = D.read_manifest(root / "m.csv")
    assert m.cell_ids == ["c1", "c2", "c3", "c4", "c5"]
    assert m.records[0].image_path == str(root / "a.png") and m.records[2].label == "tumor"
    assert m.records[0].counts_ref is None


def test_manifest_round_trip(dataset, tmp_path):
    root, _ = dataset
    m = D.read_manifest(root / "m.csv")
    D.write_manifest(tmp_path / "out.csv", m)
    assert D.read_manifest(tmp_path / "out.csv").records == m.records


def test_manifest_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("cell_id,image_path,centroid_x,centroid_y,slide_id,organ\nc1,a.png,1,2,s,o\nc1,a.png,3,4,s,o\n")
    with pytest.raises(ValidationError, match="duplicate"):
        D.read_manifest(p)
    p.write_text("cell_id,image_path,centroid_x,slide_id,organ\nc1,a.png,1,s,o\n")
    with pytest.raises(FormatError, match="centroid_y"):
        D.read_manifest(p)
    p.write_text("cell_id,image_path,centroid_x,centroid_y,slide_id,organ\nc1,a.png,x,2,s,o\n")
    with pytest.raises(FormatError, match="row 2"):
        D.read_manifest(p)


def test_extract_patches_report_and_order(dataset):
    root, img = dataset
    m = D.read_manifest(root / "m.csv")
    patches, rep = D.extract_patches(m)
    assert rep.cell_ids == ["c1", "c3", "c4"]
    assert [cid for cid, _ in rep.excluded] == ["c2", "c5"]
    np.testing.assert_array_equal(patches[0], img[20:80, 20:80].astype(np.float32) / 255)
    np.testing.assert_array_equal(patches[1], img[:, ::-1][10:70, 30:90].astype(np.float32) / 255)
    assert "c2\t" in rep.to_tsv() and rep.to_tsv().count("\n") == 5


def test_extraction_order_independent(dataset):
    root, _ = dataset
    m = D.read_manifest(root / "m.csv")
    patches, rep = D.extract_patches(m)
    recs = list(m.records)
    random.Random(0).shuffle(recs)
    p2, rep2 = D.extract_patches(D.CellManifest(recs), workers=3)
    by_id = dict(zip(rep2.cell_ids, p2))
    for cid, p in zip(rep.cell_ids, patches):
        np.testing.assert_array_equal(by_id[cid], p)
    assert sorted(rep.excluded) == sorted(rep2.excluded)


def test_load_image_grayscale_and_missing(tmp_path):
    Image.fromarray(np.full((4, 5), 51, np.uint8)).save(tmp_path / "g.png")
    img = D.load_image(tmp_path / "g.png")
    assert img.shape == (4, 5, 3) and np.all(img == np.float32(51 / 255))
    with pytest.raises(Exception):
        D.load_image(tmp_path / "nope.png")


def test_embedding_round_trip(tmp_path):
    data = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    ids = [f"cell-{i}" for i in range(6)] + ["ünï"]
    D.write_embeddings(tmp_path / "e.lemb", D.Embeddings(ids, data))
    back = D.read_embeddings(tmp_path / "e.lemb")
    assert back.ids == ids and back.data.tobytes() == data.tobytes()
    np.testing.assert_array_equal(back.row("ünï"), data[6])


def test_embedding_header_layout():
    buf = D.embeddings_bytes(D.Embeddings(["a"], np.array([[1.0, 2.0]], np.float32)))
    assert buf == b"LEMB" + (1).to_bytes(4, "little") + (1).to_bytes(8, "little") + (2).to_bytes(8, "little") \
        + (1).to_bytes(4, "little") + b"a" + np.array([1.0, 2.0], "<f4").tobytes()


def test_embedding_length_errors():
    buf = D.embeddings_bytes(D.Embeddings([str(i) for i in range(10)], np.ones((10, 3), np.float32)))
    with pytest.raises(FormatError, match="length"):
        D.embeddings_from_bytes(buf[:-12])
    with pytest.raises(FormatError, match="length"):
        D.embeddings_from_bytes(buf + b"\0" * 4)
    with pytest.raises(FormatError, match="magic"):
        D.embeddings_from_bytes(b"XEMB" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        D.embeddings_from_bytes(buf[:4] + (2).to_bytes(4, "little") + buf[8:])


def test_embedding_ids_unique():
    with pytest.raises(ValidationError):
        D.Embeddings(["a", "a"], np.zeros((2, 2)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permuted_files_align(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 20))
    ids = [f"id{i}" for i in range(n)]
    data = r.normal(size=(n, 4)).astype(np.float32)
    perm = r.permutation(n)
    a = D.embeddings_from_bytes(D.embeddings_bytes(D.Embeddings(ids, data)))
    b = D.embeddings_from_bytes(D.embeddings_bytes(D.Embeddings([ids[i] for i in perm], data[perm])))
    assert a.align(ids).tobytes() == b.align(ids).tobytes()


def test_gene_counts_toy(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("cell_id,GAPDH,CD3E\nx,3,0\ny,1,7\n")
    gc = D.load_gene_counts(p)
    assert gc.cell_ids == ["x", "y"] and gc.genes == ["GAPDH", "CD3E"]
    np.testing.assert_array_equal(gc.counts, [[3, 0], [1, 7]])


def test_gene_counts_errors(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,3,0\ny,1,7\n")
    with pytest.raises(FormatError, match="header"):
        D.load_gene_counts(p)
    p.write_text("cell_id,A,B\nx,3,-1\n")
    with pytest.raises(FormatError, match="row 2, col 3"):
        D.load_gene_counts(p)
    p.write_text("cell_id,A,B\nx,3,1.5\n")
    with pytest.raises(FormatError, match="not an integer"):
        D.load_gene_counts(p)


def test_gene_counts_round_trip(tmp_path):
    r = np.random.default_rng(3)
    gc = D.GeneCounts([f"c{i}" for i in range(9)], [f"G{j}" for j in range(4)],
                      r.integers(0, 1000, size=(9, 4)))
    for name in ("g.csv", "g.tsv"):
        D.write_gene_counts(tmp_path / name, gc)
        back = D.load_gene_counts(tmp_path / name)
        assert back.cell_ids == gc.cell_ids and back.genes == gc.genes
        np.testing.assert_array_equal(back.counts, gc.counts)


def test_gene_counts_binary_container(tmp_path):
    p = tmp_path / "g.lemb"
    D.write_embeddings(p, D.Embeddings(["a", "b"], np.array([[1, 2], [0, 5]], np.float32)))
    with pytest.raises(FormatError, match="sidecar"):
        D.load_gene_counts(p)
    (tmp_path / "g.lemb.genes").write_text("A\nB\n")
    gc = D.load_gene_counts(p)
    np.testing.assert_array_equal(gc.counts, [[1, 2], [0, 5]])
