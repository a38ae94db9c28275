"""Adaptive tail-head token alignment.

At every block input the patch tokens are scored against the projected
class texts. The ``floor(L * rho)`` best-matching tokens (heads) get
``alpha_l * t[j+]`` added, where ``j+`` is their most similar class; the
``floor(L * gamma)`` worst-matching tokens (tails) get ``beta_l * t[j-]``
subtracted, ``j-`` being their least similar class. All other rows,
[CLS] included, pass through untouched.

Selection indices are computed from detached values; gradients reach
``alpha``/``beta`` and the tokens only through the additive update.

Tie rules (deterministic): heads are taken first, ordered by descending
``s_max`` with the lower token index winning ties; tails are then taken
from the remaining tokens by ascending ``s_max``, lower index first.
``argmax``/``argmin`` over classes resolve ties to the lower class index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import patch_rows
from .config import AthaConfig, floor_ratio, ratios_fit
from .errors import ConfigError, DegenerateInputError, ShapeError
from .tensor import Tensor


@dataclass
class SelectionResult:
    """Head/tail choice for one image (or a batch, with a leading axis).

    Indices are sequence rows, so they lie in ``[1, L]``; row 0 is [CLS].
    """

    head_indices: np.ndarray
    tail_indices: np.ndarray
    s_max: np.ndarray
    j_plus: np.ndarray
    j_minus: np.ndarray

    def to_json(self) -> dict:
        return {"head_indices": self.head_indices.tolist(),
                "tail_indices": self.tail_indices.tolist(),
                "s_max": self.s_max.tolist(),
                "j_plus": self.j_plus.tolist(),
                "j_minus": self.j_minus.tolist()}


def similarity_values(patches: np.ndarray, text: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """(..., L, D) x (N, D) -> (..., L, N); larger means more similar.

    ``text`` may also be (B, N, D) for (B, L, D) patches: one text set per image.
    """
    per_image = text.ndim == 3
    if metric == "cosine":
        pn = np.sqrt(np.einsum("...i,...i->...", patches, patches))
        tn = np.sqrt(np.einsum("...i,...i->...", text, text))
        if np.any(pn == 0.0) or np.any(tn == 0.0):
            raise DegenerateInputError("zero-norm token or text row under cosine similarity")
        p, t = patches / pn[..., None], text / tn[..., None]
        return np.einsum("bld,bnd->bln", p, t) if per_image else p @ t.T
    if metric == "euclidean":
        t = text[:, None, :, :] if per_image else text
        diff = patches[..., :, None, :] - t
        return -np.sqrt(np.einsum("...i,...i->...", diff, diff))
    raise ConfigError(f"unknown metric {metric!r}")


def token_text_similarity(tokens: Tensor, text, metric: str = "cosine") -> Tensor:
    """Differentiable similarity of patch rows (excluding [CLS]) to each class text.

    ``tokens`` is (L+1, D) or (B, L+1, D); the result is (L, N) or (B, L, N).
    ``text`` is (N, D), or (E, N, D) with the batch split into E equal
    contiguous chunks. Euclidean similarity is the negated distance.
    """
    single = tokens.ndim == 2
    if single:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    text = T.as_tensor(text)
    patches = patch_rows(tokens)
    b, l, d = patches.shape
    if text.ndim == 3:
        e, n, _ = text.shape
        if b % e:
            raise ShapeError(f"batch of {b} cannot be split across {e} episodes")
        grouped = T.reshape(patches, (e, (b // e) * l, d))
        if metric == "cosine":
            sims = T.reshape(T.matmul(T.l2_normalize(grouped), T.transpose(T.l2_normalize(text))),
                             (b, l, n))
        elif metric == "euclidean":
            diff = T.sub(T.reshape(grouped, (e, (b // e) * l, 1, d)), T.reshape(text, (e, 1, n, d)))
            sims = T.reshape(T.scale(T.norm(diff), -1.0), (b, l, n))
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    elif metric == "cosine":
        sims = T.cosine_matrix(patches, text)
    elif metric == "euclidean":
        diff = T.sub(T.reshape(patches, (b, l, 1, d)), text)
        sims = T.scale(T.norm(diff), -1.0)
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    return T.reshape(sims, sims.shape[1:]) if single else sims


def select_head_tail(sims, rho: float, gamma: float) -> SelectionResult:
    """Pick head and tail tokens from an (L, N) or (B, L, N) similarity array."""
    sims = np.asarray(sims.data if isinstance(sims, Tensor) else sims, dtype=np.float64)
    if sims.ndim not in (2, 3):
        raise ShapeError(f"expected (L, N) or (B, L, N) similarities, got {sims.shape}")
    if not ratios_fit(rho, gamma):
        raise ConfigError(f"rho + gamma must be <= 1, got {rho} + {gamma}")
    n_tokens = sims.shape[-2]
    k_head = floor_ratio(n_tokens, rho)
    r_tail = floor_ratio(n_tokens, gamma)

    s_max = sims.max(axis=-1)
    j_plus = np.argmax(sims, axis=-1)
    j_minus = np.argmin(sims, axis=-1)

    # stable sorts keep the lower index first among equal keys
    heads = np.argsort(-s_max, axis=-1, kind="stable")[..., :k_head]
    rest = s_max.copy()
    np.put_along_axis(rest, heads, np.inf, axis=-1)
    tails = np.argsort(rest, axis=-1, kind="stable")[..., :r_tail]

    return SelectionResult(
        head_indices=heads + 1,
        tail_indices=tails + 1,
        s_max=s_max,
        j_plus=np.take_along_axis(j_plus, heads, axis=-1),
        j_minus=np.take_along_axis(j_minus, tails, axis=-1),
    )


def _flat_rows(idx: np.ndarray, seq_len: int) -> np.ndarray:
    batch = np.arange(idx.shape[0])[:, None] * seq_len
    return (batch + idx).reshape(-1)


def _row_images(idx: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(idx.shape[0]), idx.shape[1])


def _as_batch(tokens: Tensor, sel: SelectionResult):
    if tokens.ndim == 2:
        return T.reshape(tokens, (1,) + tokens.shape), _batched(sel), True
    return tokens, sel, False


def _batched(sel: SelectionResult) -> SelectionResult:
    if sel.head_indices.ndim == 2:
        return sel
    return SelectionResult(*(np.asarray(a)[None] for a in
                             (sel.head_indices, sel.tail_indices, sel.s_max, sel.j_plus, sel.j_minus)))


def _text_rows(text: np.ndarray, images: np.ndarray, cls: np.ndarray) -> np.ndarray:
    return text[images, cls] if text.ndim == 3 else text[cls]


def _strength(v, images: np.ndarray) -> Tensor:
    """Scalar strength, or per-image strengths (B,) / (B, 1) gathered for each selected row."""
    v = T.as_tensor(v)
    if v.data.size == 1 and v.ndim <= 1:
        return T.reshape(v, ())
    return T.gather_rows(T.reshape(v, (-1, 1)), images)


def _apply(tokens: Tensor, rows: list, updates: list) -> Tensor:
    b, n, d = tokens.shape
    rows = [r for r in rows if r.size]
    updates = [u for u in updates if u.shape[0]]
    if not rows:
        return tokens
    flat = T.reshape(tokens, (b * n, d))
    src = updates[0] if len(updates) == 1 else T.concat(updates, axis=0)
    return T.reshape(T.index_add_rows(flat, np.concatenate(rows), src), (b, n, d))


def _text_array(text) -> np.ndarray:
    return np.asarray(text.data if isinstance(text, Tensor) else text)


def modulate(tokens: Tensor, text, sel: SelectionResult, alpha, beta, pull: bool = True,
             push: bool = True) -> Tensor:
    """Add ``alpha * t[j+]`` to head rows and subtract ``beta * t[j-]`` from tail rows.

    ``text`` is (N, D) or per-image (B, N, D); ``alpha``/``beta`` are scalars
    or per-image (B,) tensors.
    """
    tokens, sel, single = _as_batch(tokens, sel)
    text = _text_array(text)
    n = tokens.shape[1]
    rows, updates = [], []
    if pull and sel.head_indices.size:
        img = _row_images(sel.head_indices)
        rows.append(_flat_rows(sel.head_indices, n))
        t = Tensor(_text_rows(text, img, sel.j_plus.reshape(-1)))
        updates.append(T.mul(t, _strength(alpha, img)))
    if push and sel.tail_indices.size:
        img = _row_images(sel.tail_indices)
        rows.append(_flat_rows(sel.tail_indices, n))
        t = Tensor(_text_rows(text, img, sel.j_minus.reshape(-1)))
        updates.append(T.scale(T.mul(t, _strength(beta, img)), -1.0))
    out = _apply(tokens, rows, updates)
    return T.reshape(out, out.shape[1:]) if single else out


def _mixture(sims: Tensor, idx: np.ndarray, text: np.ndarray, sign: float) -> Tensor:
    """``softmax(sign * S[i]) @ T'`` for every selected row, differentiable through ``S``."""
    b, l, n_cls = sims.shape
    rows = (np.arange(b)[:, None] * l + idx - 1).reshape(-1)
    picked = T.gather_rows(T.reshape(sims, (b * l, n_cls)), rows)
    w = T.softmax(picked if sign > 0 else T.scale(picked, sign))
    if text.ndim == 2:
        return T.matmul(w, Tensor(text))
    r = w.shape[0]
    mixed = T.matmul(T.reshape(w, (r, 1, n_cls)), Tensor(text[_row_images(idx)]))
    return T.reshape(mixed, (r, text.shape[-1]))


def weighted_avg_modulate(tokens: Tensor, text, sims, sel: SelectionResult, alpha, beta) -> Tensor:
    """Ablation: use softmax-weighted class-text mixtures instead of single texts.

    Heads add ``alpha * softmax(S[i]) @ T'``; tails subtract
    ``beta * softmax(-S[i]) @ T'``. Gradients flow through ``sims`` when
    it is a tensor built from ``tokens``.
    """
    tokens, sel, single = _as_batch(tokens, sel)
    sims = T.as_tensor(sims)
    if sims.ndim == 2:
        sims = T.reshape(sims, (1,) + sims.shape)
    text = _text_array(text)
    n = tokens.shape[1]
    rows, updates = [], []
    if sel.head_indices.size:
        img = _row_images(sel.head_indices)
        rows.append(_flat_rows(sel.head_indices, n))
        updates.append(T.mul(_mixture(sims, sel.head_indices, text, 1.0), _strength(alpha, img)))
    if sel.tail_indices.size:
        img = _row_images(sel.tail_indices)
        rows.append(_flat_rows(sel.tail_indices, n))
        updates.append(T.scale(T.mul(_mixture(sims, sel.tail_indices, text, -1.0), _strength(beta, img)), -1.0))
    out = _apply(tokens, rows, updates)
    return T.reshape(out, out.shape[1:]) if single else out


def alignment_losses(sims: Tensor, sel: SelectionResult) -> tuple[Tensor, Tensor]:
    """Loss-based ablation: ``-mean S[head, j+]`` and ``+mean S[tail, j-]``.

    ``sims`` is the differentiable (L, N) or (B, L, N) similarity; empty
    selections contribute zero.
    """
    if sims.ndim == 2:
        sims = T.reshape(sims, (1,) + sims.shape)
        sel = _batched(sel)
    b, l, n = sims.shape
    flat = T.reshape(sims, (b * l * n, 1))
    base = np.arange(b)[:, None] * (l * n)

    def picked(idx, cls):
        if idx.size == 0:
            return T.zeros(())
        rows = (base + (idx - 1) * n + cls).reshape(-1)
        return T.reduce_mean(T.gather_rows(flat, rows))

    pull = T.scale(picked(sel.head_indices, sel.j_plus), -1.0)
    push = picked(sel.tail_indices, sel.j_minus)
    return pull, push


@dataclass
class AthaState:
    """Per-layer pull/push strengths, one row per episode: (E, depth)."""

    alpha: Tensor
    beta: Tensor

    @classmethod
    def create(cls, cfg: AthaConfig, depth: int, episodes: int = 1) -> "AthaState":
        alpha = np.tile(np.array(cfg.alphas(depth)), (episodes, 1))
        beta = np.tile(np.array(cfg.betas(depth)), (episodes, 1))
        return cls(Tensor(alpha, requires_grad=cfg.learnable), Tensor(beta, requires_grad=cfg.learnable))

    @property
    def episodes(self) -> int:
        return self.alpha.shape[0]

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        if self.alpha.requires_grad:
            out["atha.alpha"] = self.alpha
        if self.beta.requires_grad:
            out["atha.beta"] = self.beta
        return out

    def row(self, e: int) -> "AthaState":
        return AthaState(Tensor(self.alpha.data[e:e + 1].copy()), Tensor(self.beta.data[e:e + 1].copy()))


def layer_strength(v: Tensor, layer: int, batch: int) -> Tensor:
    """Column ``layer`` of an (E, depth) strength table, expanded to (B, 1) per image."""
    e, depth = v.shape
    if batch % e:
        raise ShapeError(f"batch of {batch} cannot be split across {e} episodes")
    episode_of = np.arange(batch) // (batch // e)
    return T.gather_rows(T.reshape(v, (e * depth, 1)), episode_of * depth + layer)


@dataclass
class AthaHook:
    """Per-layer token transform plugged into ``encode_image``.

    ``text`` is (N, D) for a single episode or (E, N, D) when E episodes
    share the batch in equal contiguous chunks. ``trace``, when a list,
    collects one record per layer with the selection for every image.
    """

    cfg: AthaConfig
    state: AthaState
    text: Tensor
    trace: list | None = None
    selections: dict = field(default_factory=dict)

    def __call__(self, layer: int, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        if cfg.variant in ("none", "loss_constraint"):
            return tokens
        b = tokens.shape[0]
        text = self.text.data
        if text.ndim == 3:
            text = np.repeat(text, b // text.shape[0], axis=0)
        if cfg.variant == "weighted_avg":
            sims = token_text_similarity(tokens, self.text, cfg.metric)
        else:
            sims = similarity_values(tokens.data[:, 1:, :], text, cfg.metric)
        sel = select_head_tail(sims.data if isinstance(sims, Tensor) else sims, cfg.rho, cfg.gamma)
        self.selections[layer] = sel
        if self.trace is not None:
            self.trace.append({"layer": layer, **sel.to_json()})
        alpha = layer_strength(self.state.alpha, layer, b)
        beta = layer_strength(self.state.beta, layer, b)
        if cfg.variant == "weighted_avg":
            return weighted_avg_modulate(tokens, text, sims, sel, alpha, beta)
        return modulate(tokens, text, sel, alpha, beta, pull=cfg.variant == "full")


def atha_hook(cfg: AthaConfig, state: AthaState, text: Tensor, trace: list | None = None):
    """Hook for ``encode_image``; ``None`` when the variant never touches tokens."""
    if not cfg.modulates:
        return None
    return AthaHook(cfg, state, text, trace)
