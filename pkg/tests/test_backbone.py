import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atha import tensor as T
from atha.backbone import (ClipModel, TextBank, classify, encode_image, extract_patches, patchify,
                           project_text, transformer_block)
from atha.config import VitConfig
from atha.errors import ConfigError, DegenerateInputError
from atha.tensor import Tensor

from conftest import TINY


def test_sequence_length_default_geometry():
    cfg = VitConfig()
    model = ClipModel.create(cfg, 0)
    tokens = patchify(np.zeros((2, 3, 32, 32)), cfg, model.params)
    assert cfg.n_patches == 16 and tokens.shape == (2, 17, 64)


@pytest.mark.parametrize("bad", [dict(depth=0), dict(patch_size=5), dict(image_size=8, patch_size=8),
                                 dict(width=30, heads=4)])
def test_config_rejected(bad):
    with pytest.raises(ConfigError):
        VitConfig(**bad)


def test_wrong_image_size(tiny_model):
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 3, 32, 32)), TINY, tiny_model.params)


def test_zero_image_tokens_equal_bias(tiny_model):
    params = dict(tiny_model.params)
    params["pos"] = Tensor(np.zeros_like(params["pos"].data))
    params["patch.bias"] = Tensor(np.arange(TINY.width, dtype=float))
    tokens = patchify(np.zeros((1, 3, 16, 16)), TINY, params).data
    assert np.array_equal(tokens[0, 1:], np.tile(np.arange(TINY.width, dtype=float), (TINY.n_patches, 1)))


def test_patch_extraction_loop_oracle(rng):
    images = rng.normal(size=(2, 3, 16, 16))
    p = 4
    got = extract_patches(images, p)
    for b in range(2):
        for gy in range(4):
            for gx in range(4):
                flat = []
                for c in range(3):
                    for y in range(p):
                        for x in range(p):
                            flat.append(images[b, c, gy * p + y, gx * p + x])
                assert np.array_equal(got[b, gy * 4 + gx], flat)


# --------------------------------------------------------------------------
# text side


def test_project_text_identity_projection(rng):
    cfg = VitConfig(width=8, heads=2, text_dim=8)
    raw = rng.normal(size=(12, 8))
    bank = TextBank(raw, np.eye(8), np.ones(8), np.zeros(8))
    got = project_text(bank, [3, 5], eps=1e-300).data
    z = (raw[[3, 5]] - raw[[3, 5]].mean(1, keepdims=True)) / raw[[3, 5]].std(1, keepdims=True)
    assert np.allclose(got, z, atol=1e-12)


def test_project_text_two_step_oracle(tiny_model):
    bank = tiny_model.bank
    ids = [4, 0, 9]
    got = project_text(bank, ids).data
    for row, c in zip(got, ids):
        t = bank.raw[c]
        mu = sum(t) / len(t)
        var = sum((v - mu) ** 2 for v in t) / len(t)
        normed = [(v - mu) / math.sqrt(var + 1e-5) for v in t]
        want = [sum(normed[k] * bank.proj[d, k] for k in range(len(t))) for d in range(bank.proj.shape[0])]
        assert np.allclose(row, want, atol=1e-12)


def test_project_text_duplicates_and_permutation(tiny_model):
    a = project_text(tiny_model.bank, [2, 2, 7]).data
    assert np.array_equal(a[0], a[1])
    b = project_text(tiny_model.bank, [7, 2]).data
    assert np.array_equal(a[2], b[0]) and np.array_equal(a[0], b[1])


def test_project_text_unknown_class(tiny_model):
    with pytest.raises(IndexError):
        project_text(tiny_model.bank, [12])


# --------------------------------------------------------------------------
# blocks


def _block_oracle(x, params, layer, cfg):
    """Per-head loops with plain numpy on a single sequence."""
    pre = f"blocks.{layer}."
    P = {k[len(pre):]: v.data for k, v in params.items() if k.startswith(pre)}

    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(((v - mu) ** 2).mean(-1, keepdims=True) + cfg.ln_eps) * g + b

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))

    n, d = x.shape
    dh = d // cfg.heads
    y = ln(x, P["ln1.gain"], P["ln1.bias"])
    q, k, v = (y @ P[f"attn.{m}.weight"].T + P[f"attn.{m}.bias"] for m in "qkv")
    ctx = np.zeros_like(x)
    for h in range(cfg.heads):
        s = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = [float(q[i, s] @ k[j, s]) / math.sqrt(dh) for j in range(n)]
            m = max(scores)
            w = [math.exp(a - m) for a in scores]
            z = sum(w)
            ctx[i, s] = sum(w[j] / z * v[j, s] for j in range(n))
    x = x + ctx @ P["attn.o.weight"].T + P["attn.o.bias"]
    y = ln(x, P["ln2.gain"], P["ln2.bias"])
    return x + gelu(y @ P["mlp.fc1.weight"].T + P["mlp.fc1.bias"]) @ P["mlp.fc2.weight"].T + P["mlp.fc2.bias"]


def test_block_matches_loop_oracle(tiny_model, rng):
    x = rng.normal(size=(1, 3, TINY.width))
    got = transformer_block(Tensor(x), tiny_model.params, 1, TINY).data[0]
    assert np.abs(got - _block_oracle(x[0], tiny_model.params, 1, TINY)).max() < 1e-10


def test_block_single_token_attends_to_itself(tiny_model, rng):
    x = rng.normal(size=(1, 1, TINY.width))
    params = dict(tiny_model.params)
    got = transformer_block(Tensor(x), params, 0, TINY).data
    P = {k: v.data for k, v in params.items()}
    y = T.layer_norm(Tensor(x), params["blocks.0.ln1.gain"], params["blocks.0.ln1.bias"], TINY.ln_eps).data
    v = y @ P["blocks.0.attn.v.weight"].T + P["blocks.0.attn.v.bias"]
    after_attn = x + v @ P["blocks.0.attn.o.weight"].T + P["blocks.0.attn.o.bias"]
    assert np.allclose(got, _block_oracle(x[0], params, 0, TINY)[None], atol=1e-12)
    # with one key the attention output is exactly that key's value
    mlp_free = dict(params)
    mlp_free["blocks.0.mlp.fc2.weight"] = Tensor(np.zeros_like(P["blocks.0.mlp.fc2.weight"]))
    assert np.allclose(transformer_block(Tensor(x), mlp_free, 0, TINY).data, after_attn, atol=1e-12)


def test_block_zero_residual_branches_identity(tiny_model, rng):
    params = dict(tiny_model.params)
    for name in ("attn.o.weight", "attn.o.bias", "mlp.fc2.weight", "mlp.fc2.bias"):
        params["blocks.0." + name] = Tensor(np.zeros_like(params["blocks.0." + name].data))
    x = rng.normal(size=(2, 5, TINY.width))
    assert np.array_equal(transformer_block(Tensor(x), params, 0, TINY).data, x)


# --------------------------------------------------------------------------
# encoder and classifier


def test_identity_hook_bit_exact(tiny_model, rng):
    images = rng.normal(size=(3, 3, 16, 16))
    plain = encode_image(images, TINY, tiny_model.params).data
    hooked = encode_image(images, TINY, tiny_model.params, hook=lambda l, t: t).data
    assert np.array_equal(plain, hooked)


def test_capture_and_hook_order(tiny_model, rng):
    images = rng.normal(size=(2, 3, 16, 16))
    seen, capture = [], []

    def hook(layer, tokens):
        seen.append(layer)
        assert tokens.shape == (2, TINY.seq_len, TINY.width)
        return tokens

    encode_image(images, TINY, tiny_model.params, hook=hook, capture=capture)
    assert seen == list(range(TINY.depth))
    assert len(capture) == TINY.depth + 1
    assert all(c.shape == (2, TINY.seq_len, TINY.width) for c in capture)


def test_forward_deterministic(rng):
    images = rng.normal(size=(2, 3, 16, 16))
    a = encode_image(images, TINY, ClipModel.create(TINY, 11).params).data
    b = encode_image(images, TINY, ClipModel.create(TINY, 11).params).data
    assert a.tobytes() == b.tobytes()


def test_classify_parallel_text():
    text = np.eye(4)
    emb = np.array([[0.0, 0.0, 3.0, 0.0]])
    logits = classify(Tensor(emb), Tensor(text)).data
    assert int(np.argmax(logits)) == 2


def test_classify_identical_texts_uniform(rng):
    t = rng.normal(size=(1, 5))
    logits = classify(Tensor(rng.normal(size=(3, 5))), Tensor(np.repeat(t, 4, axis=0))).data
    assert np.all(logits == logits[:, :1])


def test_classify_scalar_oracle(rng):
    emb, text = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    got = classify(Tensor(emb), Tensor(text)).data
    for i in range(3):
        for j in range(4):
            dot = sum(a * b for a, b in zip(emb[i], text[j]))
            want = dot / math.sqrt(sum(a * a for a in emb[i])) / math.sqrt(sum(b * b for b in text[j]))
            assert abs(got[i, j] - want) < 1e-12


def test_classify_grouped_matches_per_episode(rng):
    emb, text = rng.normal(size=(6, 5)), rng.normal(size=(3, 4, 5))
    got = classify(Tensor(emb), Tensor(text)).data
    for e in range(3):
        want = classify(Tensor(emb[2 * e:2 * e + 2]), Tensor(text[e])).data
        assert np.allclose(got[2 * e:2 * e + 2], want, atol=1e-14)


def test_classify_zero_embedding(rng):
    with pytest.raises(DegenerateInputError):
        classify(Tensor(np.zeros((1, 5))), Tensor(rng.normal(size=(3, 5))))


@given(st.integers(0, 2 ** 32 - 1))
def test_cls_row_preserved_by_patch_only_hook(seed):
    """A hook that only touches patch rows never changes the [CLS] input row."""
    model = ClipModel.create(TINY, 5)
    images = np.random.default_rng(seed).normal(size=(1, 3, 16, 16))
    base, hooked = [], []

    def bump(layer, t):
        delta = np.zeros(t.shape)
        delta[:, 1:] = 0.5
        return T.add(t, Tensor(delta))

    encode_image(images, TINY, model.params, capture=base)
    encode_image(images, TINY, model.params, hook=bump, capture=hooked)
    assert np.array_equal(base[0].data[:, 0], hooked[0].data[:, 0])
    assert all(h.shape == (1, TINY.seq_len, TINY.width) for h in hooked)


def test_pretraining_reaches_target(desk_pretrained):
    model, info = desk_pretrained
    assert info["val_accuracy"] >= 0.95


def test_pretraining_leaves_text_bank(desk_pretrained):
    model, _ = desk_pretrained
    fresh = ClipModel.create(model.cfg, 0)
    for k, v in fresh.bank.arrays().items():
        assert np.array_equal(v, model.bank.arrays()[k])
