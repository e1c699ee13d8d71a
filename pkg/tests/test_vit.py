import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gazevit.exceptions import InvalidParameterError, MissingDataError
from gazevit.vit import (
    ModelConfig,
    VisionTransformer,
    deterministic_mode,
    export_attention,
    frames_to_tensor,
    load_checkpoint,
    patchify,
    prune_to_depth,
    randomize_parameters,
    read_checkpoint_manifest,
    reduce_attention,
    render_attention_map,
    save_checkpoint,
    unpatchify,
)

from . import oracles


def model(depth=2, seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    m = VisionTransformer(ModelConfig(depth=depth, **kw)).to(dtype)
    return randomize_parameters(m, seed).eval()


def images(n=3, seed=0, size=32, dtype=torch.float64):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# --- patchify ---------------------------------------------------------------

@pytest.mark.parametrize("size,p,n,dim", [(224, 16, 196, 768), (32, 8, 16, 192)])
def test_patch_counts(size, p, n, dim):
    assert patchify(np.zeros((size, size, 3)), p).shape == (n, dim)


def test_patchify_round_trip(rng):
    frame = rng.integers(0, 256, (32, 48, 3), dtype=np.uint8)
    assert np.array_equal(unpatchify(patchify(frame, 8), 8, (32, 48)), frame)


def test_patch_order_is_row_major():
    frame = np.zeros((16, 16, 1))
    frame[:8, 8:] = 1.0
    patches = patchify(frame, 8)
    assert patches.sum(1).tolist() == [0, 64, 0, 0]


def test_patchify_rejects_indivisible():
    with pytest.raises(InvalidParameterError):
        patchify(np.zeros((30, 32, 3)), 8)


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        ModelConfig(embed_dim=65, heads=2)
    with pytest.raises(InvalidParameterError):
        ModelConfig(depth=0)
    with pytest.raises(InvalidParameterError):
        ModelConfig(image_size=30)


# --- forward ----------------------------------------------------------------

def test_forward_shapes():
    logits, attn = model()(images())
    assert logits.shape == (3, 2)
    assert attn.shape == (3, 2, 2, 17, 17)


def test_zero_query_key_gives_uniform_attention():
    m = model()
    with torch.no_grad():
        for block in m.blocks:
            for layer in (block.attn.query, block.attn.key):
                layer.weight.zero_()
                layer.bias.zero_()
    _, attn = m(images())
    np.testing.assert_allclose(attn.detach().numpy(), 1 / 17, atol=1e-15)


@given(st.integers(0, 10**6))
def test_rows_sum_to_one(seed):
    _, attn = model(seed=seed % 7)(images(2, seed))
    np.testing.assert_allclose(attn.sum(-1).detach().numpy(), 1.0, atol=1e-6)
    assert attn.min() >= 0


def test_deterministic_forward_is_bit_identical():
    with deterministic_mode(3):
        a = model(seed=3, dtype=torch.float32)(images(dtype=torch.float32))
    with deterministic_mode(3):
        b = model(seed=3, dtype=torch.float32)(images(dtype=torch.float32))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_huge_inputs_stay_finite():
    logits, attn = model()(images() * 1e6)
    assert torch.isfinite(logits).all() and torch.isfinite(attn).all()


def test_wrong_input_shape():
    with pytest.raises(InvalidParameterError):
        model()(torch.zeros(1, 3, 16, 16, dtype=torch.float64))


def test_zero_head_is_indifferent():
    torch.manual_seed(0)
    m = VisionTransformer(ModelConfig(head_init="zeros"))
    logits, _ = m(images(dtype=torch.float32))
    assert torch.all(logits == 0)


def test_patch_permutation_equivariance():
    m = model()
    x = images(1)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(1))
    grid = x.reshape(1, 3, 4, 8, 4, 8).permute(0, 2, 4, 1, 3, 5).reshape(1, 16, 3, 8, 8)
    shuffled = grid[:, perm].reshape(1, 4, 4, 3, 8, 8).permute(0, 3, 1, 4, 2, 5).reshape(1, 3, 32, 32)
    permuted = model()
    with torch.no_grad():
        pos = m.pos_embed.clone()
        permuted.pos_embed[:, 1:] = pos[:, 1:][:, perm]
    base = reduce_attention(m(x)[1])
    moved = reduce_attention(permuted(shuffled)[1])
    torch.testing.assert_close(moved, base[..., perm], atol=1e-12, rtol=0)


# --- reduce_attention --------------------------------------------------------------

def test_reduce_uniform():
    np.testing.assert_allclose(reduce_attention(np.full((17, 17), 1 / 17)), np.full(16, 1 / 17))


def test_reduce_concentrated_column():
    w = np.zeros((17, 17))
    w[0, 0] = 1.0
    w[1:, 5] = 1.0
    out = reduce_attention(w)
    assert out[4] == 1.0 and np.count_nonzero(out) == 1


def test_reduce_matches_naive_loop(rng):
    for _ in range(50):
        w = oracles.random_stochastic(rng, 17)
        assert np.max(np.abs(reduce_attention(w) - oracles.reduce_column(w))) < 1e-12


def test_reduce_modes(rng):
    w = oracles.random_stochastic(rng, 5)
    np.testing.assert_allclose(reduce_attention(w, "row"), w[1:, 1:].mean(1))
    np.testing.assert_allclose(reduce_attention(w, "cls"), w[0, 1:])
    with pytest.raises(InvalidParameterError):
        reduce_attention(w, "diagonal")


@given(st.integers(0, 10**6), st.integers(2, 30))
def test_reduced_entries_bounded(seed, n):
    w = oracles.random_stochastic(np.random.default_rng(seed), n)
    out = reduce_attention(w)
    assert np.all((out >= 0) & (out <= 1)) and out.sum() <= 1 + 1e-12


# --- render ---------------------------------------------------------------------

def test_render_one_hot():
    a = np.zeros(16)
    a[6] = 1.0
    img = render_attention_map(a, 4, 8)
    assert img.shape == (32, 32) and img.sum() == 64
    assert np.all(img[8:16, 16:24] == 1.0)


def test_render_uniform_is_half():
    assert np.all(render_attention_map(np.full(16, 0.3), 4, 8) == 0.5)


def test_render_ramp_is_blockwise_monotone():
    img = render_attention_map(np.arange(16.0), 4, 8)
    blocks = img.reshape(4, 8, 4, 8).transpose(0, 2, 1, 3).reshape(16, 64)
    assert np.all(blocks.min(1) == blocks.max(1))
    assert np.all(np.diff(blocks[:, 0]) > 0)
    assert blocks[0, 0] == 0.0 and blocks[-1, 0] == 1.0


def test_render_size_mismatch():
    with pytest.raises(InvalidParameterError):
        render_attention_map(np.ones(15), 4, 8)


# --- pruning ----------------------------------------------------------------------

def test_prune_full_depth_is_identity():
    m = model(depth=3)
    x = images()
    np.testing.assert_allclose(prune_to_depth(m, 3)(x)[0].detach(), m(x)[0].detach(), atol=1e-9, rtol=0)


def test_prune_twelve_to_one_shape():
    m = model(depth=12)
    _, attn = prune_to_depth(m, 1)(images(1))
    assert attn.shape[1] == 1


def test_prune_matches_manual_truncation():
    m = model(depth=12, seed=4)
    x = images(2, 9)
    pruned = prune_to_depth(m, 5)
    with torch.no_grad():
        tokens = m.embed(x)
        for block in list(m.blocks)[:5]:
            tokens, _ = block(tokens)
        expected = m.classify(tokens)
        got = pruned(x)[0]
    assert torch.max(torch.abs(got - expected)) < 1e-9
    assert m.depth == 12 and pruned.config.depth == 5


@pytest.mark.parametrize("depth", [0, 3])
def test_prune_rejects_bad_depth(depth):
    with pytest.raises(InvalidParameterError):
        prune_to_depth(model(depth=2), depth)


# --- persistence ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = model()
    path = save_checkpoint(tmp_path / "m.npz", m, extra={"note": 1})
    manifest = read_checkpoint_manifest(path)
    assert manifest["config"]["depth"] == 2 and manifest["extra"] == {"note": 1}
    assert manifest["tensors"]["pos_embed"] == [1, 17, 64]
    back = load_checkpoint(path)
    x = images()
    assert torch.equal(back(x)[0], m(x)[0])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingDataError):
        load_checkpoint(tmp_path / "none.npz")


def test_export_attention(tmp_path):
    _, attn = model()(images(1))
    path = export_attention(tmp_path / "a.npz", attn[0])
    with np.load(path) as data:
        assert sorted(data.files) == ["layer0_head0", "layer0_head1", "layer1_head0", "layer1_head1"]
        np.testing.assert_array_equal(data["layer1_head0"], attn[0, 1, 0].detach().numpy())


def test_frames_to_tensor_scales_uint8():
    t = frames_to_tensor(np.full((2, 4, 4, 3), 255, dtype=np.uint8))
    assert t.shape == (2, 3, 4, 4) and torch.all(t == 1.0)
