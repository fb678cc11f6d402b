import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cliff import checkpoint
from cliff.baselines import GlobalHeadClassifier, PromptPoolClassifier
from cliff.errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ParameterError,
    RegistrationError,
)
from cliff.loading import load_model
from cliff.model import PER_MATERIAL, SINGLE, CliffModel, HeadConfig
from cliff.synth import DEFAULT_PROFILES, derive_rng, render_flake
from cliff.tensor import Adam, no_grad, softmax_cross_entropy
from cliff.vit import VitConfig

C = 3


def images(n=4, seed=0, material="BN"):
    p = DEFAULT_PROFILES[material]
    return np.stack([render_flake(p, i % 3, derive_rng(seed, i)).image for i in range(n)])


def model_with(names=("BN",), seed=0):
    m = CliffModel(VitConfig(), HeadConfig(), seed=seed)
    m.freeze_base()
    for name in names:
        m.add_material(name)
    return m


def set_block_bias(model, i, values):
    """Make delta head ``i`` output a constant vector."""
    dh = model.delta_heads[i]
    dh.fc2.weight.data[...] = 0.0
    dh.fc2.bias.data[...] = np.asarray(values, np.float32)


# -- base head and deltas ------------------------------------------------------------

def test_zero_base_head_gives_zero_logits():
    m = model_with()
    m.base_head.weight.data[...] = 0
    m.base_head.bias.data[...] = 0
    assert np.array_equal(m.base_logits(images()).data, np.zeros((4, 3), np.float32))


def test_new_delta_is_zero_for_any_features():
    m = model_with(("BN", "Graphene"))
    x = images()
    for i in range(2):
        assert not np.any(m.delta(x, i).data)
    assert not np.any(m.delta(x, 1, m.features(x, 0)).data)


def test_delta_index_out_of_range():
    m = model_with()
    with pytest.raises(IndexError):
        m.delta(images(), 1)


def test_embedding_receives_gradient_through_concat():
    m = model_with()
    x, y = images(), np.array([0, 1, 2, 0])
    softmax_cross_entropy(m.global_logits(x), y).backward()
    # fc2 starts at zero, so only fc2 sees gradient on the first step
    assert np.abs(m.delta_heads[0].fc2.weight.grad).sum() > 0
    opt = Adam(m.material_parameters(0), lr=1e-2)
    opt.step()
    m.zero_grad()
    softmax_cross_entropy(m.global_logits(x), y).backward()
    assert np.abs(m.embeddings.rows[0].grad).sum() > 0


def test_deltas_depend_on_embedding_after_training():
    m = model_with(("BN",))
    x, y = images(), np.array([0, 1, 2, 0])
    opt = Adam(m.material_parameters(0), lr=1e-2)
    for _ in range(2):
        opt.zero_grad()
        softmax_cross_entropy(m.global_logits(x), y).backward()
        opt.step()
    m.add_material("Graphene")
    # give material 1 the same head weights but its own embedding row
    for src, dst in zip(m.delta_heads[0].parameters(), m.delta_heads[1].parameters()):
        dst.data[...] = src.data
    z = m.features(x, 0)
    assert not np.array_equal(m.delta(x, 0, z).data, m.delta(x, 1, z).data)


# -- global logits ---------------------------------------------------------------------

def test_single_material_zero_delta_equals_base():
    m = model_with()
    x = images()
    assert np.array_equal(m.global_logits(x).data, m.base_logits(x).data)


def test_block_layout():
    m = model_with(("BN", "Graphene", "MoS2"))
    set_block_bias(m, 1, [1.0, 2.0, 3.0])
    x = images()
    g = m.global_logits(x).data
    assert g.shape == (4, 3 * 3)
    np.testing.assert_allclose(g[:, 3:6], m.base_logits(x).data + [1, 2, 3], atol=1e-6)
    np.testing.assert_array_equal(g[:, 0:3], m.base_logits(x).data)


def test_hand_set_deltas_pick_their_block():
    m = model_with(("BN", "Graphene"))
    m.base_head.weight.data[...] = 0
    m.base_head.bias.data[...] = 0
    set_block_bias(m, 1, [0.0, 10.0, 0.0])
    cls, mat = m.predict(images())
    assert np.all(cls == 1) and np.all(mat == 1)


def test_unknown_mode_is_a_parameter_error():
    with pytest.raises(ParameterError):
        model_with().global_logits(images(), mode="bogus")


def test_modes_agree_for_one_material():
    m = model_with()
    set_block_bias(m, 0, [0.1, -0.2, 0.3])
    m.delta_heads[0].fc2.weight.data[...] = np.random.default_rng(0).normal(0, 0.1, (3, 64))
    x = images()
    assert np.array_equal(m.global_logits(x, PER_MATERIAL).data, m.global_logits(x, SINGLE, 0).data)


def test_single_prompt_mode_needs_index():
    m = model_with()
    with pytest.raises(ParameterError):
        m.global_logits(images(), SINGLE)


# -- prediction ---------------------------------------------------------------------------

def test_ties_go_to_lowest_index():
    m = model_with(("BN", "Graphene"))
    m.base_head.weight.data[...] = 0
    m.base_head.bias.data[...] = 0
    cls, mat = m.predict(images())
    assert np.all(cls == 0) and np.all(mat == 0)


def test_single_material_prediction_is_three_way_argmax():
    m = model_with()
    x = images(6)
    with no_grad():
        expected = np.argmax(m.base_logits(x).data, axis=-1)
    cls, mat = m.predict(x)
    assert np.array_equal(cls, expected) and not np.any(mat)


def test_single_image_predict():
    m = model_with()
    x = images(2)
    assert m.predict_logits(x[0]).shape == (3,)
    np.testing.assert_allclose(m.predict_logits(x[0]), m.predict_logits(x)[0], atol=1e-6)


@settings(max_examples=50, deadline=None, derandomize=True)
@given(materials=st.integers(1, 8), data=st.data())
def test_global_index_decoding_round_trips(materials, data):
    k = data.draw(st.integers(0, C * materials - 1))
    cls, mat = k % C, k // C
    assert 0 <= mat < materials and mat * C + cls == k


# -- add_material ------------------------------------------------------------------------

def test_add_material_bookkeeping():
    m = model_with(("BN",))
    x = images()
    assert m.global_logits(x).shape == (4, 3)
    assert m.add_material("Graphene") == 1
    assert m.num_materials == len(m.prompts) == len(m.delta_heads) == len(m.embeddings) == 2
    assert m.global_logits(x).shape == (4, 6)


def test_add_material_rejects_duplicates():
    m = model_with(("BN",))
    with pytest.raises(RegistrationError):
        m.add_material("BN")


def test_parameter_census_after_add_material():
    m = model_with(("BN", "Graphene"))
    m.add_material("MoS2")
    trainable = {id(p) for p in m.parameters() if p.requires_grad}
    assert trainable == {id(p) for p in m.material_parameters(2)}
    assert m.prompts[2].tokens.requires_grad and m.embeddings.rows[2].requires_grad
    assert not m.embeddings.rows[1].requires_grad


def test_new_block_starts_at_base_decision():
    m = model_with(("BN",))
    set_block_bias(m, 0, [5.0, -1.0, 0.0])
    m.add_material("Graphene")
    x = images(8, material="Graphene")
    with no_grad():
        g = m.global_logits(x).data
        base = m.base_logits(x).data
    assert np.array_equal(g[:, 3:6].argmax(-1), base.argmax(-1))


def test_fresh_prompt_and_embedding_scale():
    m = CliffModel(VitConfig(embed_dim=128, heads=4), HeadConfig(prompt_length=64, material_dim=512), seed=3)
    m.add_material("BN")
    assert np.std(m.prompts[0].tokens.data) == pytest.approx(0.02, rel=0.1)
    assert np.std(m.embeddings.rows[0].data) == pytest.approx(0.02, rel=0.15)


# -- checkpoints -----------------------------------------------------------------------

def test_save_load_save_is_byte_identical(tmp_path):
    m = model_with(("BN", "Graphene"))
    set_block_bias(m, 1, [0.5, 0.25, -1.0])
    m.save_checkpoint(tmp_path / "a.clif")
    loaded = CliffModel.load_checkpoint(tmp_path / "a.clif")
    loaded.save_checkpoint(tmp_path / "b.clif")
    assert (tmp_path / "a.clif").read_bytes() == (tmp_path / "b.clif").read_bytes()
    x = images()
    assert np.array_equal(loaded.predict_logits(x), m.predict_logits(x))


def test_load_preserves_materials_and_freeze_flags(tmp_path):
    m = model_with(("BN", "Graphene", "MoS2"))
    m.save_checkpoint(tmp_path / "m.clif")
    loaded = load_model(tmp_path / "m.clif")
    assert isinstance(loaded, CliffModel)
    assert loaded.material_names == ["BN", "Graphene", "MoS2"]
    flags = {n: p.requires_grad for n, p in m.named_parameters()}
    assert flags == {n: p.requires_grad for n, p in loaded.named_parameters()}
    assert loaded.head_config == m.head_config and loaded.vit_config == m.vit_config


@pytest.mark.parametrize("offset", [-9, -200, 40])
def test_corrupted_byte_fails_checksum(tmp_path, offset):
    path = tmp_path / "m.clif"
    model_with().save_checkpoint(path)
    raw = bytearray(path.read_bytes())
    raw[offset] ^= 0x5A
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointChecksumError):
        checkpoint.read(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.clif"
    model_with().save_checkpoint(path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointTruncatedError):
        checkpoint.read(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.clif"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointFormatError):
        load_model(path)


def test_version_mismatch_is_distinct():
    data = bytearray(checkpoint.encode({"kind": "cliff"}, [("w", np.ones(2, np.float32))]))
    data[4:8] = struct.pack("<I", 99)
    body = bytes(data[:-8])
    data = body + checkpoint._digest(body)
    with pytest.raises(CheckpointVersionError):
        checkpoint.decode(data)


def test_encode_layout():
    data = checkpoint.encode({"a": 1}, [("w", np.arange(6, dtype=np.float32).reshape(2, 3))])
    assert data[:4] == b"CLIF"
    version, meta_len = struct.unpack("<II", data[4:12])
    assert version == checkpoint.VERSION and data[12:12 + meta_len] == b'{"a":1}'
    meta, tensors = checkpoint.decode(data)
    assert meta == {"a": 1} and tensors["w"].shape == (2, 3)


def test_wrong_kind_is_rejected(tmp_path):
    path = tmp_path / "g.clif"
    g = GlobalHeadClassifier(seed=0)
    g.add_material("BN")
    g.save_checkpoint(path)
    with pytest.raises(CheckpointFormatError):
        CliffModel.load_checkpoint(path)


def test_baseline_checkpoints_round_trip(tmp_path):
    g = GlobalHeadClassifier(seed=1)
    g.add_material("BN")
    g.add_material("Graphene")
    pp = PromptPoolClassifier(g.backbone, pool_size=4, top_k=2, seed=2)
    pp.add_material("BN")
    x = images(3)
    for name, model in (("g.clif", g), ("p.clif", pp)):
        model.save_checkpoint(tmp_path / name)
        loaded = load_model(tmp_path / name)
        assert type(loaded) is type(model)
        assert np.array_equal(loaded.predict_logits(x), model.predict_logits(x))


def test_prompt_pool_selection_is_deterministic():
    g = GlobalHeadClassifier(seed=1)
    pp = PromptPoolClassifier(g.backbone, pool_size=8, top_k=2, seed=2)
    x = images(5)
    a, _, _ = pp.select(x)
    b, _, _ = pp.select(x)
    assert a.shape == (5, 2) and np.array_equal(a, b)
    assert not any(p.requires_grad for p in pp.backbone.parameters())
