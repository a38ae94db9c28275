"""Toy CLIP-style dual encoder.

The visual side is a pre-norm ViT operating on batches of (3, H, W)
images. The text side is a frozen, seeded embedding table per class plus
a frozen projection into the visual token width, standing in for a real
text encoder.

Parameters live in flat ``dict[str, Tensor]`` maps so they can be
checkpointed, hashed and cloned without ceremony.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import VitConfig
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# hook(layer_index, tokens[B, L+1, D]) -> tokens
Hook = Callable[[int, Tensor], Tensor]


def init_params(cfg: VitConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, p = cfg.width, cfg.patch_size
    hidden = cfg.mlp_ratio * d

    def w(out_dim, in_dim):
        return rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))

    params = {
        "patch.weight": w(d, 3 * p * p),
        "patch.bias": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, size=d),
        "pos": rng.normal(0.0, 0.02, size=(cfg.seq_len, d)),
    }
    for l in range(cfg.depth):
        pre = f"blocks.{l}."
        params[pre + "ln1.gain"] = np.ones(d)
        params[pre + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            params[pre + f"attn.{name}.weight"] = w(d, d)
            params[pre + f"attn.{name}.bias"] = np.zeros(d)
        params[pre + "ln2.gain"] = np.ones(d)
        params[pre + "ln2.bias"] = np.zeros(d)
        params[pre + "mlp.fc1.weight"] = w(hidden, d)
        params[pre + "mlp.fc1.bias"] = np.zeros(hidden)
        params[pre + "mlp.fc2.weight"] = w(d, hidden) / math.sqrt(2 * cfg.depth)
        params[pre + "mlp.fc2.bias"] = np.zeros(d)
    params["ln_post.gain"] = np.ones(d)
    params["ln_post.bias"] = np.zeros(d)
    return {k: Tensor(v) for k, v in params.items()}


@dataclass
class TextBank:
    """Frozen class text embeddings and the projection into token space."""

    raw: np.ndarray  # (n_classes_max, text_dim)
    proj: np.ndarray  # (width, text_dim)
    ln_gain: np.ndarray
    ln_bias: np.ndarray

    @classmethod
    def create(cls, cfg: VitConfig, seed: int) -> "TextBank":
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(cfg.n_classes_max, cfg.text_dim))
        proj = rng.normal(0.0, 1.0 / math.sqrt(cfg.text_dim), size=(cfg.width, cfg.text_dim))
        return cls(raw, proj, np.ones(cfg.text_dim), np.zeros(cfg.text_dim))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"text.raw": self.raw, "text.proj": self.proj,
                "text.ln_gain": self.ln_gain, "text.ln_bias": self.ln_bias}


def project_text(bank: TextBank, class_ids, eps: float = 1e-5) -> Tensor:
    """LayerNorm the selected text rows, then map them with the projection.

    Returns a constant (N, width) tensor; nothing here is trainable.
    """
    ids = np.asarray(class_ids, dtype=np.int64)
    n = bank.raw.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"class id out of range for a bank of {n} classes: {list(class_ids)}")
    with T.no_grad():
        normed = T.layer_norm(Tensor(bank.raw[ids]), Tensor(bank.ln_gain), Tensor(bank.ln_bias), eps)
        return Tensor(normed.data @ bank.proj.T)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, L, C*p*p), patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def patchify(images, cfg: VitConfig, params: dict[str, Tensor]) -> Tensor:
    """Embed a batch of images into (B, L+1, D) with [CLS] at row 0."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ConfigError(f"expected images of shape (3, {cfg.image_size}, {cfg.image_size}), "
                          f"got {images.shape[1:]}")
    b = images.shape[0]
    patches = T.linear(Tensor(extract_patches(images, cfg.patch_size)),
                       params["patch.weight"], params["patch.bias"])
    cls = T.add(T.zeros((b, 1, cfg.width)), params["cls"])
    return T.add(T.concat([cls, patches], axis=1), params["pos"])


def effective_weight(params, name: str, lora: dict | None, scale: float = 1.0) -> Tensor:
    """Frozen weight plus ``scale * B @ A``; (E, out, in) when the adapters carry an episode axis."""
    w = params[name]
    if lora is not None and name in lora:
        a, b = lora[name]
        return T.add(w, T.scale(T.matmul(b, a), scale) if scale != 1.0 else T.matmul(b, a))
    return w


def grouped_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``linear`` where a 3-D weight holds one (out, in) matrix per episode.

    The batch axis of ``x`` is split into E equal contiguous chunks, chunk
    e using ``weight[e]``.
    """
    if weight.ndim == 2:
        return T.linear(x, weight, bias)
    e, d_out, d_in = weight.shape
    b, n, _ = x.shape
    if b % e:
        raise ShapeError(f"batch of {b} cannot be split across {e} episodes")
    z = T.matmul(T.reshape(x, (e, (b // e) * n, d_in)), T.transpose(weight))
    z = T.reshape(z, (b, n, d_out))
    return z if bias is None else T.add(z, bias)


def transformer_block(x: Tensor, params: dict[str, Tensor], layer: int, cfg: VitConfig,
                      lora: dict | None = None, lora_scale: float = 1.0) -> Tensor:
    """Pre-norm MHSA + MLP, both with residual connections."""
    pre = f"blocks.{layer}."
    b, n, d = x.shape
    h, dh = cfg.heads, cfg.width // cfg.heads

    y = T.layer_norm(x, params[pre + "ln1.gain"], params[pre + "ln1.bias"], cfg.ln_eps)

    def heads(name):
        wt = effective_weight(params, pre + f"attn.{name}.weight", lora, lora_scale)
        z = grouped_linear(y, wt, params[pre + f"attn.{name}.bias"])
        return T.transpose(T.reshape(z, (b, n, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)))
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    wo = effective_weight(params, pre + "attn.o.weight", lora, lora_scale)
    x = T.add(x, grouped_linear(ctx, wo, params[pre + "attn.o.bias"]))

    y = T.layer_norm(x, params[pre + "ln2.gain"], params[pre + "ln2.bias"], cfg.ln_eps)
    y = T.gelu(T.linear(y, params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"]))
    return T.add(x, T.linear(y, params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"]))


def cls_rows(tokens: Tensor) -> Tensor:
    b, n, d = tokens.shape
    return T.gather_rows(T.reshape(tokens, (b * n, d)), np.arange(b) * n)


def patch_rows(tokens: Tensor) -> Tensor:
    """(B, L+1, D) -> (B, L, D), dropping [CLS]."""
    b, n, d = tokens.shape
    idx = (np.arange(b)[:, None] * n + np.arange(1, n)[None, :]).reshape(-1)
    return T.reshape(T.gather_rows(T.reshape(tokens, (b * n, d)), idx), (b, n - 1, d))


def encode_image(images, cfg: VitConfig, params: dict[str, Tensor], hook: Hook | None = None,
                 lora: dict | None = None, lora_scale: float = 1.0,
                 capture: list | None = None) -> Tensor:
    """Final [CLS] embedding after ``ln_post``, shape (B, D).

    ``hook`` rewrites each block's input sequence. When ``capture`` is a
    list it receives the (post-hook) input of every block followed by the
    last block's output, i.e. ``depth + 1`` tensors.
    """
    tokens = patchify(images, cfg, params)
    for layer in range(cfg.depth):
        if hook is not None:
            tokens = hook(layer, tokens)
        if capture is not None:
            capture.append(tokens)
        tokens = transformer_block(tokens, params, layer, cfg, lora, lora_scale)
    if capture is not None:
        capture.append(tokens)
    return T.layer_norm(cls_rows(tokens), params["ln_post.gain"], params["ln_post.bias"], cfg.ln_eps)


def classify(cls_embed: Tensor, text: Tensor) -> Tensor:
    """Cosine logits (B, N) between [CLS] embeddings and class text rows.

    ``text`` may be (E, N, D): one text set per episode, with the batch
    split into E equal contiguous chunks.
    """
    if cls_embed.shape[-1] != text.shape[-1]:
        raise ShapeError(f"embedding width {cls_embed.shape} does not match text {text.shape}")
    if text.ndim == 2:
        return T.cosine_matrix(cls_embed, text)
    e, n, d = text.shape
    b = cls_embed.shape[0]
    if b % e:
        raise ShapeError(f"batch of {b} cannot be split across {e} episodes")
    a = T.reshape(T.l2_normalize(cls_embed), (e, b // e, d))
    return T.reshape(T.matmul(a, T.transpose(T.l2_normalize(text))), (b, n))


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties go to the lower class index."""
    return np.argmax(logits, axis=-1)


@dataclass
class ClipModel:
    """Pretrained toy backbone plus its frozen text bank."""

    cfg: VitConfig
    params: dict[str, Tensor]
    bank: TextBank

    @classmethod
    def create(cls, cfg: VitConfig, seed: int) -> "ClipModel":
        ss = np.random.SeedSequence(seed)
        vis, txt = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        return cls(cfg, init_params(cfg, vis), TextBank.create(cfg, txt))

    def text(self, class_ids) -> Tensor:
        return project_text(self.bank, class_ids, self.cfg.ln_eps)

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.bank.arrays())
        return out

    def fingerprint(self) -> str:
        return hash_arrays(self.frozen_arrays())


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
