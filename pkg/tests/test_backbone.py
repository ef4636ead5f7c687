import numpy as np
import pytest

from cqvpr import autograd as ag
from cqvpr.autograd import Tensor
from cqvpr.backbone import (
    DESK_BACKBONE,
    FULL_BACKBONE,
    TINY_BACKBONE,
    AdaptedBlock,
    Backbone,
    BackboneConfig,
    ConfigError,
)
from cqvpr.formats import FormatError, load_precomputed_features, save_pixel_features
from cqvpr.gradcheck import grad_check
from oracles import frozen_block_reference as _frozen_block_reference


def _image(rng, size):
    return rng.uniform(0, 1, size=(size, size, 3))


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(image_size=50, patch_size=7)
    with pytest.raises(ConfigError):
        BackboneConfig(embed_dim=30, num_heads=4)
    assert DESK_BACKBONE.grid_size == 8 and DESK_BACKBONE.bottleneck == 4
    assert FULL_BACKBONE.grid_size == 16 and FULL_BACKBONE.embed_dim == 1024


def test_patchify_zero_image_gives_positional_plus_class():
    bb = Backbone(TINY_BACKBONE, np.random.default_rng(0))
    tokens = bb.patchify(np.zeros((14, 14, 3)))
    pos = bb._params["pos_embed"].data
    cls = bb._params["cls_token"].data
    np.testing.assert_array_equal(tokens.data[0], cls[0] + pos[0])
    np.testing.assert_array_equal(tokens.data[1:], pos[1:])


@pytest.mark.parametrize(
    "config, rows",
    [(BackboneConfig(image_size=224, patch_size=14, embed_dim=8, num_blocks=1, num_heads=2), 257), (DESK_BACKBONE, 65)],
)
def test_sequence_length(config, rows):
    bb = Backbone(config, np.random.default_rng(0))
    assert bb.patchify(np.zeros((config.image_size, config.image_size, 3))).shape == (rows, config.embed_dim)


def test_patch_order_is_row_major():
    cfg = BackboneConfig(image_size=14, patch_size=7, embed_dim=8, num_blocks=1, num_heads=2)
    bb = Backbone(cfg, np.random.default_rng(0))
    img = np.zeros((14, 14, 3))
    img[0:7, 7:14] = 1.0  # top-right patch -> token 2 (after class token)
    base = bb.patchify(np.zeros_like(img)).data
    diff = np.abs(bb.patchify(img).data - base).sum(axis=1)
    assert np.flatnonzero(diff > 0).tolist() == [2]


def test_patchify_size_mismatch():
    bb = Backbone(TINY_BACKBONE, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="does not match"):
        bb.patchify(np.zeros((15, 14, 3)))


def test_zeroed_adapter_matches_frozen_block():
    rng = np.random.default_rng(1)
    block = AdaptedBlock(DESK_BACKBONE, rng)
    block._params["adapter.up.weight"].data[...] = rng.standard_normal(block._params["adapter.up.weight"].shape)
    block.zero_adapter()
    x = rng.standard_normal((65, 64))
    out = block.forward(Tensor(x)).data
    assert np.max(np.abs(out - _frozen_block_reference(block, x))) <= 1e-9


def test_nonzero_adapter_changes_output():
    rng = np.random.default_rng(2)
    block = AdaptedBlock(TINY_BACKBONE, rng)
    x = rng.standard_normal((5, 8))
    before = block.forward(Tensor(x)).data
    block._params["adapter.up.weight"].data[...] = 1.0
    assert np.max(np.abs(block.forward(Tensor(x)).data - before)) > 1e-3


def test_frozen_parameters_get_exactly_zero_gradient():
    rng = np.random.default_rng(3)
    bb = Backbone(TINY_BACKBONE, rng)
    for name, t, trainable in bb.named_parameters():
        if trainable and name.endswith("adapter.up.weight"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
        if name.endswith("adapter.down.bias"):
            t.data[...] = 1.0  # keep the single bottleneck unit active
    out = bb.extract_pixel_features(_image(rng, 14))
    ag.sum_all(ag.mul(out, Tensor(rng.standard_normal(out.shape)))).backward()
    for name, t, trainable in bb.named_parameters():
        if trainable:
            assert t.requires_grad
        else:
            assert not np.any(t.grad), name
    assert np.any(bb._children["blocks.0"]._params["adapter.down.weight"].grad)


def test_adapter_gradcheck():
    rng = np.random.default_rng(4)
    bb = Backbone(TINY_BACKBONE, rng)
    adapter = [t for n, t, tr in bb.named_parameters() if tr]
    for t in adapter:
        if t.data.ndim == 2:
            t.data[...] = 0.3 * rng.standard_normal(t.shape)
    img = _image(rng, 14)
    direction = rng.standard_normal((2, 2, 8))
    closure = lambda: ag.sum_all(ag.mul(bb.extract_pixel_features(img), Tensor(direction)))  # noqa: E731
    assert grad_check(closure, adapter, eps=1e-6, avoid_kinks=True) <= 1e-4


def test_desk_pixel_feature_shape_and_determinism():
    rng = np.random.default_rng(5)
    bb = Backbone(DESK_BACKBONE, np.random.default_rng(0))
    img = _image(rng, 56)
    a, b = bb.extract_pixel_features(img), bb.extract_pixel_features(img.copy())
    assert a.shape == (8, 8, 64)
    assert a.data.tobytes() == b.data.tobytes()
    assert np.all(np.isfinite(a.data))


def test_same_seed_same_weights():
    a = Backbone(TINY_BACKBONE, np.random.default_rng(9)).state()
    b = Backbone(TINY_BACKBONE, np.random.default_rng(9)).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)


# --- precomputed features ---------------------------------------------------

def test_cqvf_round_trip_bit_identical(tmp_path):
    grid = np.random.default_rng(0).standard_normal((4, 4, 6)).astype(np.float32)
    path = tmp_path / "f.cqvf"
    save_pixel_features(path, grid)
    loaded = load_precomputed_features(path)
    assert loaded.data.dtype == np.float32
    assert loaded.data.tobytes() == grid.tobytes()


def test_cqvf_header_layout(tmp_path):
    path = tmp_path / "f.cqvf"
    save_pixel_features(path, np.zeros((16, 16, 1024), np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"CQVF"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [1, 16, 16, 1024]
    assert len(raw) == 20 + 16 * 16 * 1024 * 4
    assert load_precomputed_features(path, grid_size=16, embed_dim=1024).shape == (16, 16, 1024)


def test_cqvf_corrupt_magic_names_offset_zero(tmp_path):
    path = tmp_path / "f.cqvf"
    save_pixel_features(path, np.zeros((2, 2, 3), np.float32))
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_precomputed_features(path)
    assert info.value.offset == 0 and "offset 0" in str(info.value)


def test_cqvf_truncated_and_mismatch(tmp_path):
    path = tmp_path / "f.cqvf"
    save_pixel_features(path, np.zeros((2, 2, 3), np.float32))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_precomputed_features(path)
    save_pixel_features(path, np.zeros((2, 2, 3), np.float32))
    with pytest.raises(FormatError, match="dim"):
        load_precomputed_features(path, grid_size=2, embed_dim=4)
