import numpy as np
import pytest

from vubert import tensor as T
from vubert.embeddings import (
    CLS, END, EOI, MASK, PAD, RESERVED, SEP, UNK, EmbeddingTables, ImageRaster, PatchEmbedConfig, Vocab,
    count_patch_params, detokenize, embed_patches, embed_tokens, normalize, patch_project, patchify,
    read_raster, tokenize, unpatchify, write_raster,
)
from vubert.errors import DataError, ShapeError
from vubert.tensor import Tensor, grad_check


def test_reserved_ids_are_pinned():
    v = Vocab()
    assert [v.id(t) for t in RESERVED] == [PAD, CLS, SEP, END, EOI, MASK, UNK] == list(range(7))


def test_tokenize_examples():
    v = Vocab.build(["is it sunny ?"])
    assert tokenize("", v) == []
    assert tokenize("Is it sunny?", v) == [v.id("is"), v.id("it"), v.id("sunny"), v.id("?")]
    assert tokenize("zxqv", v) == [UNK]


def test_tokenize_round_trip_on_normalized_text():
    text = "What COLOR is the circle?  It's red, I think."
    v = Vocab.build([text])
    norm = normalize(text)
    assert detokenize(tokenize(text, v), v) == norm
    assert normalize(norm) == norm


def test_vocab_file_round_trip(tmp_path):
    v = Vocab.build(["a b c", "c d"])
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert tuple(lines[:7]) == RESERVED and lines[7:] == ["a", "b", "c", "d"]
    assert Vocab.load(tmp_path / "vocab.txt") == v
    (tmp_path / "bad.txt").write_text("a\nb\n")
    with pytest.raises(DataError):
        Vocab.load(tmp_path / "bad.txt")


# ---------------------------------------------------------------- patches

def test_patch_counts():
    assert patchify(ImageRaster(np.zeros((224, 224, 3))), 32).shape == (49, 3072)
    assert patchify(ImageRaster(np.zeros((32, 32, 3))), 8).shape == (16, 192)
    img = ImageRaster(np.random.default_rng(0).random((4, 4, 2)))
    whole = patchify(img, 4)
    assert whole.shape == (1, 32) and np.array_equal(whole.data[0], img.pixels.reshape(-1))


def test_patch_order_raster_scan_row_major_channel_minor():
    h = w = 4
    pixels = np.arange(h * w * 2, dtype=float).reshape(h, w, 2)
    p = patchify(ImageRaster(pixels), 2).data
    # patch 1 is the top-right block; its first row is pixels (0,2),(0,3) with channels interleaved
    assert p[1].tolist() == [pixels[0, 2, 0], pixels[0, 2, 1], pixels[0, 3, 0], pixels[0, 3, 1],
                             pixels[1, 2, 0], pixels[1, 2, 1], pixels[1, 3, 0], pixels[1, 3, 1]]
    assert p[2][0] == pixels[2, 0, 0]


def test_patchify_shape_error_names_dimensions():
    with pytest.raises(ShapeError, match="P=5.*H=32.*W=30"):
        patchify(ImageRaster(np.zeros((32, 30, 3))), 5)


def test_patchify_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = int(rng.integers(1, 5))
        h, w, c = p * int(rng.integers(1, 6)), p * int(rng.integers(1, 6)), int(rng.integers(1, 4))
        img = ImageRaster(rng.normal(size=(h, w, c)))
        back = unpatchify(patchify(img, p), h, w, c, p)
        assert back.pixels.tobytes() == img.pixels.tobytes()


def test_raster_file_round_trip(tmp_path):
    img = ImageRaster(np.random.default_rng(1).random((6, 4, 3)))
    write_raster(tmp_path / "x.ras", img)
    blob = (tmp_path / "x.ras").read_bytes()
    assert blob[:8] == b"VURASTER" and len(blob) == 8 + 12 + 6 * 4 * 3 * 8
    assert read_raster(tmp_path / "x.ras") == img
    (tmp_path / "y.ras").write_bytes(b"NOTRASTR" + blob[8:])
    with pytest.raises(DataError):
        read_raster(tmp_path / "y.ras")


# ---------------------------------------------------------------- projection

def test_patch_project_examples(rng):
    x = Tensor(rng.normal(size=(3, 12)))
    zero = PatchEmbedConfig(2, 3, 5, Tensor(np.zeros((12, 5))), Tensor(np.zeros(5)))
    assert np.array_equal(patch_project(x, zero).data, np.zeros((3, 5)))
    ident = PatchEmbedConfig(2, 3, 12, Tensor(np.eye(12)), Tensor(np.zeros(12)))
    assert np.array_equal(patch_project(x, ident).data, x.data)
    with pytest.raises(ShapeError):
        patch_project(Tensor(np.zeros((3, 11))), zero)


@pytest.mark.parametrize("seed", range(10))
def test_patch_project_gradients(seed):
    rng = np.random.default_rng(seed)
    cfg = PatchEmbedConfig.init(2, 3, 4, rng, std=0.5)
    x = Tensor(rng.normal(size=(3, 12)))
    w = Tensor(rng.normal(size=(3, 4)))
    f = lambda _: T.sum_(T.mul(T.gelu(patch_project(x, cfg)), w))  # noqa: E731
    for leaf in (cfg.weight, cfg.bias, x):
        assert grad_check(f, leaf) < 1e-4


def test_count_patch_params_examples():
    assert count_patch_params(1, 1, 1) == 2
    assert count_patch_params(32, 3, 768) == 2_360_064
    assert count_patch_params(32, 3, 192) == 590_016
    assert count_patch_params(8, 3, 64) == 12_352


def test_count_patch_params_matches_constructed_module():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p, c, d = (int(v) for v in rng.integers(1, 9, size=3))
        cfg = PatchEmbedConfig.init(p, c, d, rng)
        brute = sum(1 for t in (cfg.weight, cfg.bias) for _ in np.nditer(t.data))
        assert count_patch_params(p, c, d) == cfg.n_params() == brute


# ---------------------------------------------------------------- embedding sums

def _tables(rng, v=6, l=8, d=4):
    return EmbeddingTables.init(v, l, d, rng, std=1.0)


def test_embed_tokens_definition(rng):
    t = _tables(rng)
    zero = EmbeddingTables(Tensor(np.zeros((6, 4))), Tensor(np.zeros((8, 4))), Tensor(np.zeros((2, 4))))
    assert np.array_equal(embed_tokens([1, 2], zero, [0, 1], [1, 1]).data, np.zeros((2, 4)))
    row = embed_tokens([3], t, [0], [1]).data[0]
    assert np.array_equal(row, t.word.data[3] + t.position.data[0] + t.segment.data[1])
    with pytest.raises(IndexError):
        embed_tokens([6], t, [0], [1])
    with pytest.raises(IndexError):
        embed_tokens([1], t, [8], [1])
    with pytest.raises(IndexError):
        embed_tokens([1], t, [0], [2])


@pytest.mark.parametrize("seed", range(10))
def test_embed_tokens_gradients_scatter(seed):
    rng = np.random.default_rng(seed)
    t = _tables(rng)
    ids, pos, seg = [2, 2, 5, 2], [0, 3, 3, 7], [1, 0, 1, 1]
    w = Tensor(rng.normal(size=(4, 4)))
    f = lambda _: T.sum_(T.mul(embed_tokens(ids, t, pos, seg), w))  # noqa: E731
    for leaf in (t.word, t.position, t.segment):
        assert grad_check(f, leaf) < 1e-4


def test_embed_patches_shared_segment(rng):
    t = _tables(rng)
    proj = Tensor(np.tile(rng.normal(size=4), (2, 1)))
    out = embed_patches(proj, t, [1, 2]).data
    np.testing.assert_allclose(out[0] - out[1], t.position.data[1] - t.position.data[2], atol=1e-15)
    np.testing.assert_array_equal(out[0], proj.data[0] + t.position.data[1] + t.segment.data[0])
    zero = EmbeddingTables(Tensor(np.zeros((6, 4))), Tensor(np.zeros((8, 4))), Tensor(np.zeros((2, 4))))
    assert not embed_patches(Tensor(np.zeros((2, 4))), zero, [0, 1]).data.any()


@pytest.mark.parametrize("seed", range(10))
def test_embed_patches_gradients(seed):
    rng = np.random.default_rng(seed)
    t = _tables(rng)
    proj = Tensor(rng.normal(size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    f = lambda _: T.sum_(T.mul(embed_patches(proj, t, [4, 5, 6]), w))  # noqa: E731
    for leaf in (proj, t.position, t.segment):
        assert grad_check(f, leaf) < 1e-4


def test_embeddings_linear_in_tables(rng):
    t = _tables(rng)
    doubled = EmbeddingTables(Tensor(2 * t.word.data), Tensor(2 * t.position.data), Tensor(2 * t.segment.data))
    ids, pos, seg = [1, 4, 4], [0, 1, 2], [0, 1, 1]
    assert np.array_equal(embed_tokens(ids, doubled, pos, seg).data, 2 * embed_tokens(ids, t, pos, seg).data)
    proj = Tensor(rng.normal(size=(2, 4)))
    assert np.array_equal(embed_patches(Tensor(2 * proj.data), doubled, [3, 4]).data,
                          2 * embed_patches(proj, t, [3, 4]).data)
