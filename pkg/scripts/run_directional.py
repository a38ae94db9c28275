"""Ten-seed directional study: accuracy, domain CKA and similarity-curve deciles per variant.

Usage: python scripts/run_directional.py --seeds 10 --episodes 100 --out results/directional
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from atha.config import EpisodeConfig
from atha.experiments import StudyConfig, paired_t_interval, seed_study


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--probe-episodes", type=int, default=20)
    p.add_argument("--variants", nargs="+", default=["none", "push_tail_only", "full"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="results/directional")
    args = p.parse_args()

    cfg = StudyConfig(episode=EpisodeConfig(episodes=args.episodes), variants=tuple(args.variants),
                      probe_episodes=args.probe_episodes, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in range(args.seeds):
        path = out / f"seed_{seed}.json"
        if path.exists():
            results.append(json.loads(path.read_text()))
            continue
        t0 = time.perf_counter()
        res = seed_study(seed, cfg, progress=lambda s, v, r: print(f"  seed {s} {v}: acc {r['accuracy']:.4f} "
                                                                    f"cka {r['cka']:.4f}", flush=True))
        res["seconds"] = time.perf_counter() - t0
        path.write_text(json.dumps(res, indent=1))
        results.append(res)

    def col(variant, key):
        return np.array([r["variants"][variant][key] for r in results])

    summary = {}
    for v in ["pretrained", *args.variants]:
        summary[v] = {k: float(col(v, k).mean()) for k in
                      ("accuracy", "cka", "curve_bottom_decile", "curve_top_decile")}
    if "none" in args.variants:
        for v in args.variants:
            if v != "none":
                m, lo, hi = paired_t_interval(col(v, "accuracy") - col("none", "accuracy"))
                summary[v]["delta_vs_none"] = {"mean": m, "ci95": [lo, hi]}
                summary[v]["cka_above_none_seeds"] = int(np.sum(col(v, "cka") > col("none", "cka")))
    summary["seconds"] = float(sum(r["seconds"] for r in results))
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
