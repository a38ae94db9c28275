"""Parameter-efficient episode fine-tuning: LoRA adapters, AdamW, train/eval loops.

Only the support set of an :class:`~atha.data.Episode` and the frozen
model are visible here; nothing in this module touches files or the
source domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .alignment import AthaState, atha_hook, select_head_tail, token_text_similarity
from .backbone import ClipModel, classify, encode_image, predict
from .config import AthaConfig, OptimConfig
from .data import Episode, augment
from .errors import ConfigError, NumericFailure
from .tensor import Tensor

LORA_TARGETS = ("q", "v")


@dataclass
class LoraAdapter:
    """Low-rank update ``scale * B @ A`` for a frozen (out, in) weight.

    ``A``/``B`` may carry a leading episode axis, giving one update per episode.
    """

    A: Tensor
    B: Tensor
    rank: int
    scale: float = 1.0

    def delta(self) -> Tensor:
        d = T.matmul(self.B, self.A)
        return d if self.scale == 1.0 else T.scale(d, self.scale)

    def effective(self, weight: Tensor) -> Tensor:
        return T.add(weight, self.delta())

    def row(self, e: int) -> "LoraAdapter":
        return LoraAdapter(Tensor(self.A.data[e:e + 1].copy()), Tensor(self.B.data[e:e + 1].copy()),
                           self.rank, self.scale)


def _lora_init(d_out: int, d_in: int, rank: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= rank <= min(d_in, d_out):
        raise ConfigError(f"LoRA rank {rank} outside [1, {min(d_in, d_out)}]")
    bound = 1.0 / math.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(rank, d_in)), np.zeros((d_out, rank))


def lora_wrap(weight: Tensor, rank: int, rng: np.random.Generator, scale: float = 1.0) -> LoraAdapter:
    a, b = _lora_init(*weight.shape, rank, rng)
    return LoraAdapter(Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), rank, scale)


def make_adapters(model: ClipModel, rank: int, rngs, scale: float = 1.0) -> dict[str, LoraAdapter]:
    """Stacked adapters for ``len(rngs)`` episodes; episode e draws only from ``rngs[e]``."""
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs]
    out = {}
    for layer in range(model.cfg.depth):
        for name in LORA_TARGETS:
            key = f"blocks.{layer}.attn.{name}.weight"
            pairs = [_lora_init(*model.params[key].shape, rank, r) for r in rngs]
            a = Tensor(np.stack([p[0] for p in pairs]), requires_grad=True)
            b = Tensor(np.stack([p[1] for p in pairs]), requires_grad=True)
            out[key] = LoraAdapter(a, b, rank, scale)
    return out


def lora_pairs(adapters: dict[str, LoraAdapter]) -> dict:
    return {k: (a.A, a.B) for k, a in adapters.items()}


# --------------------------------------------------------------------------
# AdamW


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimConfig) -> "OptimState":
        return cls(cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)


def adamw_step(params: dict[str, Tensor], state: OptimState, seed=None) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Gradients are read from ``p.grad`` (missing means zero).
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericFailure(f"non-finite gradient for {name} at step {state.step + 1}", seed)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data * (1.0 - state.lr * state.weight_decay)
        p.data = data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------------------
# episode fine-tuning


@dataclass
class Adapted:
    """Everything an episode trains, bundled with the config that produced it.

    Arrays carry a leading episode axis of size E; E > 1 only while a
    group of episodes is trained together (see :func:`finetune_group`).
    """

    atha_cfg: AthaConfig
    adapters: dict[str, LoraAdapter]
    state: AthaState
    lora_scale: float = 1.0

    @property
    def episodes(self) -> int:
        return self.state.episodes

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for key, a in self.adapters.items():
            out[key + ".lora_A"] = a.A
            out[key + ".lora_B"] = a.B
        variant = self.atha_cfg.variant
        if variant in ("full", "weighted_avg"):
            out.update(self.state.trainable())
        elif variant == "push_tail_only" and self.state.beta.requires_grad:
            out["atha.beta"] = self.state.beta
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.trainable().items()}
        out["atha.alpha"] = self.state.alpha.data
        out["atha.beta"] = self.state.beta.data
        return out

    def row(self, e: int) -> "Adapted":
        """Frozen copy of episode ``e``'s parameters."""
        return Adapted(self.atha_cfg, {k: a.row(e) for k, a in self.adapters.items()},
                       self.state.row(e), self.lora_scale)

    def hook(self, text: Tensor, trace: list | None = None):
        return atha_hook(self.atha_cfg, self.state, text, trace)


def init_adapted(model: ClipModel, atha_cfg: AthaConfig, optim_cfg: OptimConfig, rngs) -> Adapted:
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs]
    adapters = make_adapters(model, optim_cfg.lora_rank, rngs, optim_cfg.lora_scale)
    state = AthaState.create(atha_cfg, model.cfg.depth, len(rngs))
    return Adapted(atha_cfg, adapters, state, optim_cfg.lora_scale)


def episode_loss(model: ClipModel, adapted: Adapted, images: np.ndarray, labels: np.ndarray,
                 text: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sum over episodes of each episode's mean loss, plus the per-episode values.

    Cross-entropy over cosine logits, plus the alignment penalties for
    loss_constraint. ``text`` is (N, D) or (E, N, D); images are grouped by
    episode in equal contiguous chunks.
    """
    cfg = adapted.atha_cfg
    e = adapted.episodes
    capture = [] if cfg.variant == "loss_constraint" else None
    emb = encode_image(images, model.cfg, model.params, adapted.hook(text),
                       lora_pairs(adapted.adapters), adapted.lora_scale, capture)
    logits = classify(emb, text)
    b, n = logits.shape
    logp = T.log_softmax(T.scale(logits, 1.0 / model.cfg.tau))
    picked = T.gather_rows(T.reshape(logp, (b * n, 1)), np.arange(b) * n + np.asarray(labels))
    per_image = T.scale(T.reshape(picked, (e, b // e)), -1.0)
    per_episode = T.reduce_mean(per_image, axis=1)
    if capture is not None:
        sims = token_text_similarity(capture[-1], text, cfg.metric)
        sel = select_head_tail(sims, cfg.rho, cfg.gamma)
        pull, push = _grouped_alignment(sims, sel, e)
        per_episode = T.add(per_episode, T.add(T.scale(pull, cfg.lambda_pull),
                                               T.scale(push, cfg.lambda_push)))
    return T.tsum(per_episode), per_episode.data.copy()


def _grouped_alignment(sims: Tensor, sel, episodes: int) -> tuple[Tensor, Tensor]:
    """Per-episode pull/push terms, each of shape (E,)."""
    b, l, n = sims.shape
    flat = T.reshape(sims, (b * l * n, 1))
    base = np.arange(b)[:, None] * (l * n)

    def picked(idx, cls):
        if idx.size == 0:
            return T.zeros((episodes,))
        rows = (base + (idx - 1) * n + cls).reshape(-1)
        vals = T.reshape(T.gather_rows(flat, rows), (episodes, -1))
        return T.reduce_mean(vals, axis=1)

    return T.scale(picked(sel.head_indices, sel.j_plus), -1.0), picked(sel.tail_indices, sel.j_minus)


@dataclass
class FinetuneResult:
    adapted: Adapted
    losses: list
    log: list


def _episode_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init, aug = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(aug)


def finetune_group(model: ClipModel, episodes: list[Episode], atha_cfg: AthaConfig,
                   optim_cfg: OptimConfig, seeds: list[int] | None = None) -> list[FinetuneResult]:
    """Fine-tune several same-shaped episodes in one batched computation.

    Every episode keeps its own LoRA, alpha/beta, optimiser moments and RNG
    streams, and its loss only reaches its own parameters, so each result
    matches a separate :func:`finetune` call up to floating-point
    summation order.
    """
    if not episodes:
        return []
    seeds = [ep.seed for ep in episodes] if seeds is None else list(seeds)
    shapes = {(ep.n_way, len(ep.support_labels)) for ep in episodes}
    if len(shapes) != 1:
        raise ConfigError(f"episodes in a group must share N-way and support size, got {sorted(shapes)}")
    rngs = [_episode_rngs(s) for s in seeds]
    adapted = init_adapted(model, atha_cfg, optim_cfg, [r[0] for r in rngs])
    text = Tensor(np.stack([model.text(ep.class_ids).data for ep in episodes]))
    labels = np.concatenate([ep.support_labels for ep in episodes])
    params = adapted.trainable()
    opt = OptimState.from_config(optim_cfg)
    e = len(episodes)
    losses = [[] for _ in range(e)]
    logs = [[] for _ in range(e)]
    for epoch in range(optim_cfg.epochs):
        images = [ep.support_images for ep in episodes]
        if optim_cfg.augment:
            images = [augment(im, r[1], optim_cfg.crop_padding) for im, r in zip(images, rngs)]
        for p in params.values():
            p.zero_grad()
        loss, values = episode_loss(model, adapted, np.concatenate(images), labels, text)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise NumericFailure(f"non-finite loss at epoch {epoch}", seeds[bad[0]])
        T.backward(loss)
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                rows = np.flatnonzero(~np.isfinite(p.grad.reshape(e, -1)).all(axis=1))
                raise NumericFailure(f"non-finite gradient for {name} at epoch {epoch}", seeds[rows[0]])
        adamw_step(params, opt)
        alpha, beta = adapted.state.alpha.data, adapted.state.beta.data
        for i in range(e):
            losses[i].append(float(values[i]))
            logs[i].append({"epoch": epoch, "loss": float(values[i]),
                            "alpha": alpha[i].tolist(), "beta": beta[i].tolist()})
    return [FinetuneResult(adapted.row(i), losses[i], logs[i]) for i in range(e)]


def finetune(model: ClipModel, episode: Episode, atha_cfg: AthaConfig, optim_cfg: OptimConfig,
             seed: int | None = None) -> FinetuneResult:
    """Train LoRA (and alpha/beta when learnable) on the support set only.

    The frozen backbone and text bank are never written to.
    """
    seeds = None if seed is None else [seed]
    return finetune_group(model, [episode], atha_cfg, optim_cfg, seeds)[0]


def embed(model: ClipModel, images: np.ndarray, class_ids, adapted: Adapted | None = None,
          batch_size: int = 128, capture_layer: int | None = None):
    """Final [CLS] features of a single episode's images, without gradient tracking.

    With ``capture_layer`` set, also returns that layer's token sequences.
    """
    if adapted is not None and adapted.episodes != 1:
        raise ConfigError("embed takes a single-episode adapted model; use Adapted.row")
    text = model.text(class_ids)
    feats, tokens = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            capture = [] if capture_layer is not None else None
            hook = adapted.hook(text) if adapted is not None else None
            lora = lora_pairs(adapted.adapters) if adapted is not None else None
            scale = adapted.lora_scale if adapted is not None else 1.0
            emb = encode_image(chunk, model.cfg, model.params, hook, lora, scale, capture)
            feats.append(emb.data)
            if capture is not None:
                tokens.append(capture[capture_layer].data)
    feats = np.concatenate(feats)
    if capture_layer is None:
        return feats
    return feats, np.concatenate(tokens)


def evaluate(model: ClipModel, episode: Episode, adapted: Adapted | None = None) -> float:
    """Query accuracy of the (optionally adapted) model on one episode."""
    feats = embed(model, episode.query_images, episode.class_ids, adapted)
    with T.no_grad():
        logits = classify(Tensor(feats), model.text(episode.class_ids)).data
    return float(np.mean(predict(logits) == episode.query_labels))
