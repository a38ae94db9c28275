"""Episodic fine-tune/evaluate loops shared by the CLI, scripts and acceptance tests.

Episode ``i`` of a run with seed ``s`` is always drawn with
``episode_seed(s, i)`` and trained with that same seed, so results do not
depend on how episodes are grouped across worker processes. Episodes are
trained in fixed-size groups (``group_size``), which is part of the run
configuration.
"""

from __future__ import annotations

import math
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .adaptation import Adapted, evaluate, finetune_group
from .analysis import domain_cka, mean_ci, similarity_curve
from .backbone import ClipModel
from .config import AthaConfig, EpisodeConfig, OptimConfig, PretrainConfig, VitConfig
from .data import Dataset, DomainSpec, Episode, episode_seed, gen_synthetic_domains, sample_episode
from .pretrain import pretrain


@dataclass
class Probe:
    """Optional per-episode diagnostics run right after fine-tuning."""

    source: Dataset | None = None
    cka_samples: int = 0
    curve_layer: int | None = None
    episodes: int = 0  # probe only the first n episodes (0 = all)

    def wants(self, index: int) -> bool:
        return self.episodes == 0 or index < self.episodes


@dataclass
class EpisodeOutcome:
    index: int
    seed: int
    episode: Episode
    accuracy: float
    losses: list
    log: list
    adapted: Adapted
    extra: dict = field(default_factory=dict)

    def record(self, variant: str) -> dict:
        st = self.adapted.state
        return {"index": self.index, "seed": self.seed, "variant": variant,
                "class_ids": self.episode.class_ids, "accuracy": self.accuracy,
                "final_loss": self.losses[-1] if self.losses else None,
                "alpha": st.alpha.data[0].tolist(), "beta": st.beta.data[0].tolist(),
                "support_index": self.episode.support_index.tolist(),
                "query_index": self.episode.query_index.tolist(), **self.extra}


def plan_episodes(target: Dataset, ep: EpisodeConfig, seed: int, start: int = 0) -> list[tuple[int, int]]:
    """(index, episode seed) pairs for a run."""
    return [(i, episode_seed(seed, i)) for i in range(start, start + ep.episodes)]


def probe_episode(model: ClipModel, target: Dataset, episode: Episode, adapted: Adapted | None,
                  probe: Probe, seed: int) -> dict:
    out = {}
    if probe.source is not None and probe.cka_samples:
        rep = domain_cka(model, probe.source, target, probe.cka_samples, seed, episode.class_ids, adapted)
        out["cka"] = rep.value
    if probe.curve_layer is not None:
        curve = similarity_curve(model, target, 0, probe.curve_layer, episode.class_ids, adapted,
                                 images=episode.query_images)
        out["curve_bottom_decile"], out["curve_top_decile"] = curve.decile_means()
    return out


def _run_group(model: ClipModel, target: Dataset, items: list[tuple[int, int]], ep: EpisodeConfig,
               atha_cfg: AthaConfig, optim_cfg: OptimConfig, probe: Probe | None) -> list[EpisodeOutcome]:
    episodes = [sample_episode(target, ep.n_way, ep.k_shot, ep.m_query, s) for _, s in items]
    results = finetune_group(model, episodes, atha_cfg, optim_cfg, [s for _, s in items])
    out = []
    for (index, seed), episode, res in zip(items, episodes, results):
        acc = evaluate(model, episode, res.adapted)
        extra = probe_episode(model, target, episode, res.adapted, probe, seed) \
            if probe is not None and probe.wants(index) else {}
        out.append(EpisodeOutcome(index, seed, episode, acc, res.losses, res.log, res.adapted, extra))
    return out


_WORKER: dict = {}


def _init_worker(payload):
    _WORKER.update(payload)


def _worker_group(items):
    w = _WORKER
    with threadpool_limits(limits=1):
        return _run_group(w["model"], w["target"], items, w["ep"], w["atha"], w["optim"], w["probe"])


def run_episodes(model: ClipModel, target: Dataset, ep: EpisodeConfig, atha_cfg: AthaConfig,
                 optim_cfg: OptimConfig, seed: int, jobs: int = 1, probe: Probe | None = None,
                 progress=None) -> list[EpisodeOutcome]:
    """Fine-tune and evaluate ``ep.episodes`` target episodes, ordered by index."""
    items = plan_episodes(target, ep, seed)
    size = max(1, ep.group_size)
    groups = [items[i:i + size] for i in range(0, len(items), size)]
    outcomes: list[EpisodeOutcome] = []
    if jobs <= 1 or len(groups) == 1:
        with threadpool_limits(limits=1):
            for g in groups:
                outcomes += _run_group(model, target, g, ep, atha_cfg, optim_cfg, probe)
                if progress is not None:
                    progress(len(outcomes), len(items))
    else:
        payload = {"model": model, "target": target, "ep": ep, "atha": atha_cfg,
                   "optim": optim_cfg, "probe": probe}
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        with ctx.Pool(jobs, initializer=_init_worker, initargs=(payload,)) as pool:
            for res in pool.imap(_worker_group, groups):
                outcomes += res
                if progress is not None:
                    progress(len(outcomes), len(items))
    return sorted(outcomes, key=lambda o: o.index)


def zero_shot(model: ClipModel, target: Dataset, ep: EpisodeConfig, seed: int,
              probe: Probe | None = None) -> list[dict]:
    """Accuracy (and probes) of the frozen pretrained model on the same episodes."""
    out = []
    for index, s in plan_episodes(target, ep, seed):
        episode = sample_episode(target, ep.n_way, ep.k_shot, ep.m_query, s)
        rec = {"index": index, "seed": s, "accuracy": evaluate(model, episode)}
        if probe is not None and probe.wants(index):
            rec.update(probe_episode(model, target, episode, None, probe, s))
        out.append(rec)
    return out


def summarize(accuracies) -> dict:
    mean, ci = mean_ci(accuracies)
    acc = np.asarray(accuracies, dtype=np.float64)
    return {"episodes": int(acc.size), "accuracy_mean": mean, "accuracy_ci95": ci,
            "accuracy_std": float(acc.std(ddof=1)) if acc.size > 1 else 0.0}


def paired_t_interval(diffs, confidence: float = 0.95) -> tuple[float, float, float]:
    """Mean and two-sided t confidence interval of paired differences."""
    d = np.asarray(diffs, dtype=np.float64)
    m = float(d.mean())
    if d.size < 2:
        return m, -math.inf, math.inf
    half = float(stats.t.ppf(0.5 + confidence / 2, d.size - 1) * d.std(ddof=1) / math.sqrt(d.size))
    return m, m - half, m + half


# --------------------------------------------------------------------------
# per-seed directional study


@dataclass
class StudyConfig:
    """One seeded replicate: fresh domains, fresh pretraining, then every variant on the same episodes."""

    vit: VitConfig = field(default_factory=lambda: VitConfig(width=32))
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(epochs=150))
    domain: DomainSpec = field(default_factory=lambda: DomainSpec(shift=0.8))
    episode: EpisodeConfig = field(default_factory=lambda: EpisodeConfig(n_way=5, k_shot=5, m_query=15,
                                                                        episodes=100))
    optim: OptimConfig = field(default_factory=OptimConfig)
    variants: tuple = ("none", "push_tail_only", "full")
    probe_episodes: int = 20
    cka_samples: int = 200
    jobs: int = 1


def seed_study(seed: int, cfg: StudyConfig, pretrained: ClipModel | None = None, progress=None) -> dict:
    """Accuracy, CKA and curve deciles for every variant, averaged over episodes of one seed.

    CKA and curves are computed on the first ``cfg.probe_episodes`` episodes,
    on the episode's classes, with the same paired draws for every model.
    """
    source, target = gen_synthetic_domains(cfg.domain, seed)
    if pretrained is None:
        pretrained, info = pretrain(source, cfg.vit, cfg.pretrain, seed)
        val = info["val_accuracy"]
    else:
        val = None
    probe = Probe(source=source, cka_samples=cfg.cka_samples, curve_layer=cfg.vit.depth,
                  episodes=cfg.probe_episodes)
    out = {"seed": seed, "source_val_accuracy": val, "variants": {}}

    def summary(records):
        probed = [r for r in records if "cka" in r]
        return {"accuracy": float(np.mean([r["accuracy"] for r in records])),
                "accuracies": [r["accuracy"] for r in records],
                "cka": float(np.mean([r["cka"] for r in probed])),
                "curve_bottom_decile": float(np.mean([r["curve_bottom_decile"] for r in probed])),
                "curve_top_decile": float(np.mean([r["curve_top_decile"] for r in probed]))}

    out["variants"]["pretrained"] = summary(zero_shot(pretrained, target, cfg.episode, seed, probe))
    for variant in cfg.variants:
        outcomes = run_episodes(pretrained, target, cfg.episode, AthaConfig(variant=variant), cfg.optim,
                                seed, cfg.jobs, probe)
        out["variants"][variant] = summary([{"accuracy": o.accuracy, **o.extra} for o in outcomes])
        del outcomes
        if progress is not None:
            progress(seed, variant, out["variants"][variant])
    return out
