import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from melroformer.diffcore import grad_check
from melroformer.heads import (
    FrameHead,
    EmbeddingProjection,
    OnsetHead,
    Posteriorgram,
    apply_mask,
    assemble_mask,
    embedding_projection,
    pool_to_frame_rate,
)
from melroformer.melband import MelBandMap, build_mel_band_map


def brute_force_mask(y, band_map, C):
    """Per-(c, f, t) average over every band row that lands on bin f."""
    y = y.numpy()
    F_, T = band_map.n_bins, y.shape[-1]
    sums = np.zeros((C, F_, T))
    counts = np.zeros(F_)
    row = 0
    for s, e in band_map.bands:
        for c in range(C):
            for f in range(s, e + 1):
                sums[c, f] += y[row]
                if c == 0:
                    counts[f] += 1
                row += 1
    out = np.zeros((C, F_, T))
    for c in range(C):
        for f in range(F_):
            if counts[f]:
                out[c, f] = sums[c, f] / counts[f]
            else:
                out[c, f] = 1.0 if c % 2 == 0 else 0.0
    return out


def random_map(rng, n_bins):
    k = int(rng.integers(1, 8))
    bands = []
    for _ in range(k):
        s = int(rng.integers(0, n_bins))
        e = int(rng.integers(s, n_bins))
        bands.append((s, e))
    return MelBandMap(bands, n_bins)


@given(seed=st.integers(0, 100_000))
def test_mask_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    band_map = random_map(rng, int(rng.integers(4, 30)))
    C = int(rng.choice([2, 4]))
    Z = C * sum(band_map.widths)
    y = torch.as_tensor(rng.standard_normal((Z, 3)))
    got = assemble_mask(y, band_map, C).numpy()
    assert np.array_equal(got, brute_force_mask(y, band_map, C))


def test_mask_seven_band_map():
    band_map = build_mel_band_map(44100, 2048, 7)
    y = torch.randn(4 * sum(band_map.widths), 2, dtype=torch.float64)
    assert np.array_equal(assemble_mask(y, band_map, 4).numpy(), brute_force_mask(y, band_map, 4))


def test_mask_two_band_mean():
    band_map = MelBandMap([(0, 1), (1, 2)], 3)
    y = torch.tensor([[0.9], [0.2], [0.0], [0.0], [0.6], [0.5], [0.0], [0.0]], dtype=torch.float64)
    mask = assemble_mask(y, band_map, 2)
    assert mask[0, 0, 0] == 0.9  # single band, unchanged
    assert torch.isclose(mask[0, 1, 0], torch.tensor(0.4, dtype=torch.float64))
    assert mask[0, 2, 0] == 0.5


def test_mask_batched_and_wrong_rows():
    band_map = MelBandMap([(0, 2), (2, 4)], 6)
    y = torch.randn(3, 2 * 6, 5)
    assert assemble_mask(y, band_map, 2).shape == (3, 2, 6, 5)
    with pytest.raises(ValueError):
        assemble_mask(torch.randn(11, 5), band_map, 2)


def test_apply_mask_cases():
    x = torch.randn(4, 5, 3)
    ident = torch.zeros_like(x)
    ident[0::2] = 1.0
    assert torch.equal(apply_mask(ident, x), x)
    assert torch.equal(apply_mask(torch.zeros_like(x), x), torch.zeros_like(x))
    one = torch.zeros(2, 1, 1)
    one[0] = 1.0
    i = torch.zeros(2, 1, 1)
    i[1] = 1.0
    assert torch.equal(apply_mask(i, one).flatten(), torch.tensor([0.0, 1.0]))


def test_apply_mask_complex_inverse():
    x = torch.randn(4, 6, 3, dtype=torch.float64)
    xr, xi = x[0::2], x[1::2]
    mag2 = xr**2 + xi**2
    inv = torch.empty_like(x)
    inv[0::2], inv[1::2] = xr / mag2, -xi / mag2
    out = apply_mask(inv, x)
    assert torch.allclose(out[0::2], torch.ones_like(xr))
    assert torch.allclose(out[1::2], torch.zeros_like(xi), atol=1e-12)


def test_embedding_projection_shapes():
    proj = EmbeddingProjection(16, [64] * 32)
    assert embedding_projection(torch.randn(1, 16, 32, 7), proj).shape == (1, 2048, 7)
    band_map = build_mel_band_map(44100, 2048, 7)
    sep = EmbeddingProjection(8, [4 * w for w in band_map.widths])
    assert sep.output_sizes[0] == 184
    out = sep(torch.randn(2, 8, 7, 3))
    assert out.shape == (2, 4 * sum(band_map.widths), 3)


def test_embedding_projection_zero():
    proj = EmbeddingProjection(8, [4, 6])
    for lin in list(proj.linear1) + list(proj.linear2):
        torch.nn.init.zeros_(lin.bias)
    assert torch.equal(proj(torch.zeros(1, 8, 2, 3)), torch.zeros(1, 10, 3))


def test_mask_path_gradients():
    band_map = MelBandMap([(0, 2), (1, 4), (4, 5)], 7)
    proj = EmbeddingProjection(4, [2 * w for w in band_map.widths]).double()
    h = torch.randn(1, 4, 3, 2, dtype=torch.float64)
    w = torch.randn(1, 2, 7, 2, dtype=torch.float64)
    params = dict(proj.named_parameters())
    params["h"] = h
    rep = grad_check(lambda *_: (assemble_mask(proj(h), band_map, 2) * w).sum(), params, eps=1e-5)
    assert rep.max_relative_error < 1e-5


def test_heads_zero_gives_half():
    on, fr = OnsetHead(16), FrameHead(16)
    for lin in (on.hidden, on.out, fr.out):
        torch.nn.init.zeros_(lin.bias)
    on.eval()
    assert torch.equal(on(torch.zeros(1, 16, 300)), torch.full((1, 60, 300), 0.5))
    assert torch.equal(fr(torch.zeros(1, 16, 5)), torch.full((1, 61, 5), 0.5))


def test_heads_shapes_and_determinism():
    on = OnsetHead(64).eval()
    e = torch.randn(1, 64, 300)
    a, b = on(e), on(e)
    assert a.shape == (1, 60, 300) and torch.equal(a, b)
    assert ((a > 0) & (a < 1)).all()
    fr = FrameHead(64)
    assert fr(e).shape == (1, 61, 300)
    e2 = torch.randn(1, 64, 300)
    bias = fr.out.bias[None, :, None]
    assert torch.allclose(fr.logits(e + e2) - bias, (fr.logits(e) - bias) + (fr.logits(e2) - bias), atol=1e-5)


def test_pool_to_frame_rate():
    y = torch.randn(3, 300)
    assert torch.equal(pool_to_frame_rate(y, 50.0, 50.0), y)
    c = torch.full((2, 800), 0.3)
    out = pool_to_frame_rate(c, 100.0, 50.0)
    assert out.shape == (2, 400) and torch.allclose(out, torch.full((2, 400), 0.3))
    with pytest.raises(ValueError):
        pool_to_frame_rate(y, 0.0)


def test_posteriorgram_validation():
    with pytest.raises(ValueError):
        Posteriorgram(torch.zeros(61, 3), torch.zeros(61, 3))
    with pytest.raises(ValueError):
        Posteriorgram(torch.zeros(60, 3), torch.zeros(61, 4))
