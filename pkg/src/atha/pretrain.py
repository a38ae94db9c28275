"""Source-domain warm-up that produces the "pretrained" toy backbone."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .adaptation import OptimState, adamw_step, embed
from .alignment import token_text_similarity
from .backbone import ClipModel, classify, encode_image, predict
from .config import PretrainConfig, VitConfig
from .data import Dataset, augment

log = logging.getLogger(__name__)


def split_train_val(ds: Dataset, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    val, train = [], []
    for cls in np.unique(ds.labels):
        idx = rng.permutation(ds.indices_of(cls))
        n_val = int(round(len(idx) * val_fraction))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def accuracy(model: ClipModel, ds: Dataset, class_ids) -> float:
    feats = embed(model, ds.images, class_ids)
    with T.no_grad():
        logits = classify(T.Tensor(feats), model.text(class_ids)).data
    labels = np.searchsorted(np.asarray(class_ids), ds.labels)
    return float(np.mean(predict(logits) == labels))


def token_loss(tokens: T.Tensor, text: T.Tensor, labels: np.ndarray, tau: float) -> T.Tensor:
    """Every patch token of an image classified against the texts with the image label."""
    sims = token_text_similarity(tokens, text)
    b, l, n = sims.shape
    return T.cross_entropy_from_similarities(T.reshape(sims, (b * l, n)), np.repeat(labels, l), tau)


def pretrain(source: Dataset, vit: VitConfig, cfg: PretrainConfig, seed: int,
             callback=None) -> tuple[ClipModel, dict]:
    """Train every backbone weight on the source classes; the text bank stays fixed.

    Stops early once validation accuracy reaches ``cfg.target_accuracy``.
    """
    model = ClipModel.create(vit, seed)
    class_ids = sorted(int(c) for c in np.unique(source.labels))
    train_idx, val_idx = split_train_val(source, cfg.val_fraction, seed)
    train, val = source.subset(train_idx), source.subset(val_idx)
    labels = np.searchsorted(np.asarray(class_ids), train.labels)
    text = model.text(class_ids)

    params = model.params
    for p in params.values():
        p.requires_grad = True
    opt = OptimState(cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    history = []
    val_acc = 0.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for p in params.values():
                p.zero_grad()
            images = augment(train.images[idx], rng)
            capture = [] if cfg.token_align > 0 else None
            emb = encode_image(images, vit, params, capture=capture)
            loss = T.cross_entropy_from_similarities(classify(emb, text), labels[idx], vit.tau)
            if capture is not None:
                loss = T.add(loss, T.scale(token_loss(capture[-1], text, labels[idx], vit.tau),
                                           cfg.token_align))
            T.backward(loss)
            adamw_step(params, opt)
            losses.append(loss.item())
        val_acc = accuracy(model, val, class_ids)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": val_acc})
        log.info("pretrain epoch %d loss %.4f val %.4f", epoch, np.mean(losses), val_acc)
        if callback is not None:
            callback(history[-1])
        if val_acc >= cfg.target_accuracy:
            break
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    return model, {"history": history, "val_accuracy": val_acc, "class_ids": class_ids}
