import math
import statistics

import numpy as np
import pytest

from atha.config import AthaConfig, EpisodeConfig, OptimConfig, PretrainConfig, VitConfig
from atha.data import DomainSpec, episode_seed
from atha.experiments import (Probe, StudyConfig, paired_t_interval, plan_episodes, run_episodes,
                              seed_study, summarize, zero_shot)

# two-sided 95% t quantiles, from printed tables
T975 = {4: 2.776, 9: 2.262}


def test_paired_t_interval_table_values():
    d = [0.01, 0.03, -0.005, 0.02, 0.015]
    m, lo, hi = paired_t_interval(d)
    half = T975[4] * statistics.stdev(d) / math.sqrt(5)
    assert m == pytest.approx(statistics.fmean(d))
    assert hi - m == pytest.approx(half, rel=1e-3) and m - lo == pytest.approx(half, rel=1e-3)


def test_paired_t_interval_single_value():
    m, lo, hi = paired_t_interval([0.2])
    assert m == 0.2 and lo == -math.inf and hi == math.inf


def test_summarize():
    s = summarize([0.5, 0.7])
    assert s["episodes"] == 2 and s["accuracy_mean"] == pytest.approx(0.6)
    assert s["accuracy_ci95"] == pytest.approx(1.96 * statistics.stdev([0.5, 0.7]) / math.sqrt(2))


def test_plan_uses_index_seeds(tiny_domains):
    plan = plan_episodes(tiny_domains[1], EpisodeConfig(episodes=3), 7)
    assert plan == [(i, episode_seed(7, i)) for i in range(3)]


def test_group_size_does_not_change_episodes(tiny_model, tiny_domains):
    _, target = tiny_domains
    cfg = AthaConfig(variant="full", rho=0.25, gamma=0.25)
    opt = OptimConfig(epochs=2)
    a = run_episodes(tiny_model, target, EpisodeConfig(n_way=3, k_shot=2, m_query=3, episodes=4, group_size=1),
                     cfg, opt, 5)
    b = run_episodes(tiny_model, target, EpisodeConfig(n_way=3, k_shot=2, m_query=3, episodes=4, group_size=4),
                     cfg, opt, 5)
    assert [o.episode.class_ids for o in a] == [o.episode.class_ids for o in b]
    assert np.allclose([o.losses for o in a], [o.losses for o in b], rtol=1e-10)


def test_zero_shot_with_probe(tiny_model, tiny_domains):
    source, target = tiny_domains
    probe = Probe(source=source, cka_samples=20, curve_layer=2, episodes=1)
    recs = zero_shot(tiny_model, target, EpisodeConfig(n_way=3, k_shot=1, m_query=3, episodes=2), 0, probe)
    assert "cka" in recs[0] and "cka" not in recs[1]
    assert recs[0]["curve_bottom_decile"] <= recs[0]["curve_top_decile"]


def test_seed_study_smoke():
    cfg = StudyConfig(vit=VitConfig(image_size=16, patch_size=4, width=8, heads=2, depth=2, text_dim=6),
                      pretrain=PretrainConfig(epochs=1),
                      domain=DomainSpec(images_per_class=20, image_size=16),
                      episode=EpisodeConfig(episodes=2, group_size=2), optim=OptimConfig(epochs=2),
                      probe_episodes=1, cka_samples=20)
    res = seed_study(0, cfg)
    assert set(res["variants"]) == {"pretrained", "none", "push_tail_only", "full"}
    assert all(len(v["accuracies"]) == 2 for v in res["variants"].values())
