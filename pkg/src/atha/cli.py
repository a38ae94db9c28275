"""Command line: gen-data, pretrain, finetune-eval, analyze.

Exit codes: 0 success, 2 usage/config, 3 IO, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, experiments
from .adaptation import Adapted, LoraAdapter
from .alignment import AthaState
from .config import METRICS, VARIANTS, AthaConfig, RunConfig, replace
from .data import DomainSpec, gen_synthetic_domains, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericFailure, SamplingError, VersionError
from .tensor import Tensor

log = logging.getLogger("atha")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(read_json(path)) if path else RunConfig()


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if not Path(args.spec).is_file():
        raise UsageError(f"spec file not found: {args.spec}")
    spec = DomainSpec(**read_json(args.spec))
    source, target = gen_synthetic_domains(spec, args.seed)
    out = Path(args.out)
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    dump_json(out / "spec.json", {"spec": spec.to_dict(), "seed": args.seed})
    print(f"wrote {len(source)} source and {len(target)} target images to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pretrain import pretrain

    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    source = load_dataset(args.data)
    if source.domain_tag != "source":
        raise ConfigError(f"{args.data} is a {source.domain_tag!r} dataset, expected source")
    model, info = pretrain(source, cfg.vit, cfg.pretrain, cfg.seed,
                           callback=lambda h: log.info("epoch %(epoch)d val %(val_accuracy).4f", h))
    checkpoint.save_model(model, args.out, {"seed": cfg.seed, "pretrain": dataclasses.asdict(cfg.pretrain),
                                            "val_accuracy": info["val_accuracy"],
                                            "class_ids": info["class_ids"], "history": info["history"]})
    print(f"validation accuracy {info['val_accuracy']:.4f}; checkpoint at {args.out}")
    return EXIT_OK


def _finetune_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    atha = cfg.atha
    changes = {k: getattr(args, k) for k in ("variant", "metric", "rho", "gamma") if getattr(args, k) is not None}
    if args.fixed:
        changes["learnable"] = False
    if changes:
        atha = AthaConfig(**{**dataclasses.asdict(atha), **changes})
    ep = cfg.episode
    ep_changes = {"k_shot": args.shots, "episodes": args.episodes, "n_way": args.ways,
                  "m_query": args.queries}
    ep = replace(ep, **{k: v for k, v in ep_changes.items() if v is not None})
    seed = cfg.seed if args.seed is None else args.seed
    return replace(cfg, atha=atha, episode=ep, seed=seed, ckpt=str(args.ckpt), target=str(args.target),
                   run_tag=args.tag or Path(args.out).name)


def save_adapted(adapted: Adapted, root: Path, meta: dict) -> None:
    arrays = dict(adapted.arrays())
    for key, a in adapted.adapters.items():
        arrays.setdefault(key + ".lora_A", a.A.data)
        arrays.setdefault(key + ".lora_B", a.B.data)
    checkpoint.save_arrays(root, arrays, {"kind": "adapted", "atha": dataclasses.asdict(adapted.atha_cfg),
                                          "lora_rank": next(iter(adapted.adapters.values())).rank,
                                          "lora_scale": adapted.lora_scale, **meta})


def load_adapted(root) -> tuple[Adapted, dict]:
    arrays, manifest = checkpoint.load_arrays(root)
    if manifest.get("kind") != "adapted":
        raise VersionError(f"{root}: not an adapted-episode checkpoint")
    atha = AthaConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in manifest["atha"].items()})
    state = AthaState(Tensor(arrays["atha.alpha"]), Tensor(arrays["atha.beta"]))
    adapters = {}
    for key in arrays:
        if key.endswith(".lora_A"):
            base = key[:-len(".lora_A")]
            adapters[base] = LoraAdapter(Tensor(arrays[key]), Tensor(arrays[base + ".lora_B"]),
                                         manifest["lora_rank"], manifest["lora_scale"])
    return Adapted(atha, adapters, state, manifest["lora_scale"]), manifest


def cmd_finetune_eval(args) -> int:
    cfg = _finetune_config(args)
    pinned = args.config and "vit" in read_json(args.config)
    model, _ = checkpoint.load_model(args.ckpt, cfg.vit if pinned else None)
    cfg = replace(cfg, vit=model.cfg)
    target = load_dataset(args.target)
    if target.domain_tag != "target":
        raise ConfigError(f"{args.target} is a {target.domain_tag!r} dataset, expected target")
    probe = None
    if args.curve_layer is not None:
        probe = experiments.Probe(curve_layer=args.curve_layer, episodes=args.probe_episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "config.json", cfg.to_dict())
    outcomes = experiments.run_episodes(
        model, target, cfg.episode, cfg.atha, cfg.optim, cfg.seed, args.jobs, probe,
        progress=lambda done, total: log.info("episodes %d/%d", done, total))
    with (out / "episodes.jsonl").open("w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.record(cfg.atha.variant), sort_keys=True) + "\n")
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        for o in outcomes:
            for row in o.log:
                fh.write(json.dumps({"episode": o.index, **row}, sort_keys=True) + "\n")
    if args.save_adapters:
        for o in outcomes:
            save_adapted(o.adapted, out / "checkpoints" / f"episode_{o.index:04d}",
                         {"episode": o.index, "seed": o.seed, "class_ids": o.episode.class_ids})
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "analysis").mkdir(exist_ok=True)
    metrics = {"run_tag": cfg.run_tag, "variant": cfg.atha.variant, "metric": cfg.atha.metric,
               "seed": cfg.seed, "checkpoint_fingerprint": model.fingerprint(),
               **experiments.summarize([o.accuracy for o in outcomes])}
    dump_json(out / "metrics.json", metrics)
    print(f"{cfg.atha.variant}: accuracy {metrics['accuracy_mean']:.4f} "
          f"+- {metrics['accuracy_ci95']:.4f} over {metrics['episodes']} episodes")
    return EXIT_OK


def _adapted_from_args(args):
    if not args.run:
        return None, None
    root = Path(args.run) / "checkpoints" / f"episode_{args.episode:04d}"
    adapted, manifest = load_adapted(root)
    return adapted, manifest["class_ids"]


def cmd_analyze(args) -> int:
    out = Path(args.out)
    tag = args.tag
    if args.mode == "compare":
        if not args.tags:
            raise UsageError("--mode compare needs --tags")
        rows = analysis.compare_report(args.runs_root, args.tags, out / "analysis" if args.run_layout else out, tag)
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        return EXIT_OK
    if not args.ckpt or not args.target:
        raise UsageError(f"--mode {args.mode} needs --ckpt and --target")
    model, _ = checkpoint.load_model(args.ckpt)
    target = load_dataset(args.target)
    adapted, class_ids = _adapted_from_args(args)
    if args.classes:
        class_ids = [int(c) for c in args.classes.split(",")]
    model_tag = "pretrained" if adapted is None else f"{Path(args.run).name}#{args.episode}"
    if args.mode == "cka":
        if not args.source:
            raise UsageError("--mode cka needs --source")
        source = load_dataset(args.source)
        rep = analysis.domain_cka(model, source, target, args.samples, args.seed, class_ids, adapted, model_tag)
        rows = [{"model_tag": rep.model_tag, "domain_pair": "/".join(rep.domain_pair), "cka": rep.value,
                 "n_samples": rep.n_samples, "feature_dim": rep.feature_dim}]
        analysis.write_table(rows, out, tag, "cka")
        print(f"CKA {rep.value:.6f}")
        return EXIT_OK
    if class_ids is None:
        class_ids = sorted(int(c) for c in np.unique(target.labels))
    layer = model.cfg.depth if args.layer is None else args.layer
    curve = analysis.similarity_curve(model, target, args.images, layer, class_ids, adapted,
                                      args.seed, model_tag)
    rows = [{"rank": i, "similarity": float(v)} for i, v in enumerate(curve.values)]
    analysis.write_table(rows, out, tag, "simcurve")
    lo, hi = curve.decile_means()
    print(f"bottom decile {lo:.6f} top decile {hi:.6f} ({len(curve.values)} tokens)")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atha", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate paired source/target datasets")
    g.add_argument("--spec", required=True, help="domain spec JSON")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train the toy backbone on the source domain")
    t.add_argument("--data", required=True, help="source dataset directory")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune-eval", help="per-episode fine-tuning and query evaluation")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--target", required=True)
    f.add_argument("--variant", choices=VARIANTS)
    f.add_argument("--metric", choices=METRICS)
    f.add_argument("--shots", type=int)
    f.add_argument("--ways", type=int)
    f.add_argument("--queries", type=int)
    f.add_argument("--episodes", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--rho", type=float)
    f.add_argument("--gamma", type=float)
    f.add_argument("--fixed", action="store_true", help="keep alpha/beta at their initial values")
    f.add_argument("--config", help="run config JSON; flags override it")
    f.add_argument("--jobs", type=int, default=1)
    f.add_argument("--tag", help="run tag (default: output directory name)")
    f.add_argument("--save-adapters", action="store_true")
    f.add_argument("--curve-layer", type=int, help="record similarity-curve deciles at this layer")
    f.add_argument("--probe-episodes", type=int, default=0)
    f.add_argument("--out", required=True, help="run directory")
    f.set_defaults(func=cmd_finetune_eval)

    a = sub.add_parser("analyze", help="CKA, similarity curves and run comparison")
    a.add_argument("--mode", choices=("cka", "simcurve", "compare"), required=True)
    a.add_argument("--ckpt")
    a.add_argument("--source")
    a.add_argument("--target")
    a.add_argument("--run", help="run directory with saved adapters")
    a.add_argument("--episode", type=int, default=0)
    a.add_argument("--classes", help="comma-separated class ids")
    a.add_argument("--samples", type=int, default=200)
    a.add_argument("--images", type=int, default=50)
    a.add_argument("--layer", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--runs-root", default=".")
    a.add_argument("--tags", nargs="*")
    a.add_argument("--run-layout", action="store_true", help="write into <out>/analysis/")
    a.add_argument("--tag", default="report")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"atha: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"atha: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, VersionError, SamplingError, TypeError) as exc:
        print(f"atha: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"atha: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, LookupError, json.JSONDecodeError) as exc:
        print(f"atha: io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
