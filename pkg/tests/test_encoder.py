import numpy as np
import pytest

from gaprune.analysis import ImportanceMap, PruneMask, build_mask
from gaprune.encoder import (EncoderConfig, apply_mask, encode, encode_at_layer, encode_batch, init_encoder,
                             load_checkpoint, measure_sparsity, save_checkpoint, tokenize)
from gaprune.errors import ConfigError, InputError, IntegrityError


def mask_for(registry, keep: float):
    bits = {e.name: np.full(e.value.shape, keep > 0.5) for e in registry.prunable()}
    return PruneMask(bits, 1.0 - keep, int(keep * registry.d_prunable), registry.fingerprint())


def test_init_is_deterministic(tiny_config):
    a, b = init_encoder(tiny_config), init_encoder(tiny_config)
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a.entries, b.entries))
    c = init_encoder(EncoderConfig(**{**tiny_config.__dict__, "seed": 1}))
    assert not np.array_equal(a["layers.0.mlp_in.weight"].value, c["layers.0.mlp_in.weight"].value)


def test_prunable_layout(tiny_registry):
    names = [e.name for e in tiny_registry.prunable()]
    assert names == ["layers.0.mlp_in.weight", "layers.0.mlp_out.weight",
                     "layers.1.mlp_in.weight", "layers.1.mlp_out.weight"]
    # 2 layers x (d*h + h*d)
    assert tiny_registry.d_prunable == 2 * 2 * 8 * 16
    assert all(not e.prunable for e in tiny_registry.entries if e.role in ("bias", "norm", "embedding"))


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(num_layers=1)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=0)
    with pytest.raises(ConfigError):
        EncoderConfig(mlp_init_scale=0.0)


def test_encode_is_unit_norm(tiny_registry):
    out = encode(tiny_registry, [1, 2, 3])
    assert abs(np.linalg.norm(out.embedding) - 1.0) < 1e-9
    # the additive epsilon shortens the vector by about eps / ||pooled||
    assert out.embedding @ out.embedding <= 1.0


def test_encode_matches_batch_and_last_layer(tiny_registry):
    seqs = [[1, 2, 3], [4, 5], [6]]
    batch = encode_batch(tiny_registry, seqs)
    for s, row in zip(seqs, batch):
        out = encode(tiny_registry, s, capture_layers=True)
        np.testing.assert_allclose(out.embedding, row, atol=1e-12)
        assert len(out.per_layer_hidden) == 2
        np.testing.assert_allclose(out.per_layer_hidden[-1], out.embedding, atol=1e-15)
        np.testing.assert_allclose(encode_at_layer(tiny_registry, s, 1), out.embedding, atol=1e-12)
        np.testing.assert_allclose(encode_at_layer(tiny_registry, s, 0), out.per_layer_hidden[0], atol=1e-12)


def test_layer0_ignores_later_layers(tiny_registry):
    before = encode_at_layer(tiny_registry, [3, 7, 9], 0)
    w = tiny_registry["layers.1.mlp_in.weight"].value
    changed = tiny_registry.with_values({"layers.1.mlp_in.weight": w + 1.0})
    np.testing.assert_array_equal(encode_at_layer(changed, [3, 7, 9], 0), before)
    assert not np.allclose(encode(changed, [3, 7, 9]).embedding, encode(tiny_registry, [3, 7, 9]).embedding)


def test_bad_inputs(tiny_registry):
    with pytest.raises(InputError):
        encode(tiny_registry, [64])
    with pytest.raises(InputError):
        encode(tiny_registry, [])
    with pytest.raises(InputError):
        encode(tiny_registry, [1] * 13)
    with pytest.raises(ValueError):
        encode_batch(tiny_registry, [[1]], layer=2)
    with pytest.raises(InputError):
        tokenize("   ", tiny_registry.config)


def test_tokenize_truncates(tiny_config):
    ids = tokenize(" ".join(f"w{i}" for i in range(20)), tiny_config)
    assert len(ids) == tiny_config.max_tokens
    assert all(0 <= i < tiny_config.vocab_size for i in ids)
    assert tokenize("Word", tiny_config) == tokenize("word", tiny_config)


def test_apply_mask_all_ones_and_all_zeros(tiny_registry):
    same = apply_mask(tiny_registry, mask_for(tiny_registry, 1.0))
    assert all(np.array_equal(a.value, b.value) for a, b in zip(same.entries, tiny_registry.entries))
    assert measure_sparsity(same) == 0.0

    zero = apply_mask(tiny_registry, mask_for(tiny_registry, 0.0))
    assert measure_sparsity(zero) == 1.0
    for a, b in zip(zero.entries, tiny_registry.entries):
        if not a.prunable:
            np.testing.assert_array_equal(a.value, b.value)


def test_apply_mask_half(tiny_registry):
    scores = ImportanceMap("magnitude", {e.name: np.abs(e.value) for e in tiny_registry.prunable()})
    mask = build_mask(scores, 0.5, tiny_registry.fingerprint())
    pruned = apply_mask(tiny_registry, mask)
    assert measure_sparsity(pruned) == 0.5
    # the source registry is untouched
    assert measure_sparsity(tiny_registry) == 0.0


def test_apply_mask_rejects_foreign_layout(tiny_registry):
    bad = mask_for(tiny_registry, 1.0)
    bad.fingerprint = "0" * 16
    with pytest.raises(IntegrityError):
        apply_mask(tiny_registry, bad)


def test_measure_sparsity_counts_exact_zeros(tiny_registry):
    w = tiny_registry["layers.0.mlp_in.weight"].value.copy()
    w[0, :4] = 0.0
    reg = tiny_registry.with_values({"layers.0.mlp_in.weight": w})
    assert measure_sparsity(reg) == 4 / tiny_registry.d_prunable


def test_checkpoint_round_trip(tiny_registry, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_registry, path)
    back = load_checkpoint(path)
    assert back.config == tiny_registry.config
    assert back.fingerprint() == tiny_registry.fingerprint()
    for a, b in zip(back.entries, tiny_registry.entries):
        assert a.name == b.name and a.role == b.role
        assert a.value.tobytes() == b.value.tobytes()
    np.testing.assert_array_equal(encode(back, [1, 2]).embedding, encode(tiny_registry, [1, 2]).embedding)


def test_checkpoint_detects_header_tampering(tiny_registry, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_registry, path)
    raw = path.read_bytes()
    path.write_bytes(raw.replace(b'"mlp_in"', b'"mlp_ix"', 1))
    with pytest.raises(IntegrityError, match="fingerprint"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
