"""Command-line entry points: pretrain, adapt, sample, correspond, eval, testbed.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 testbed gate failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import ImageDataset, load_image_dir, save_image_grid
from .experiments import SCENARIOS, run_ablation
from .latent import sample_prior
from .metrics import (FeatureExtractor, density_coverage, feature_statistics, frechet_distance,
                      intra_cluster_diversity)
from .models import ModelConfig, generate
from .synthetic import (ModeClassifier, ShapeWorldSpec, correspondence_score, hue_shift,
                        make_fewshot_target, make_shape_dataset)
from .trainer import (AdaptationConfig, ConfigError, NonFiniteError, PretrainConfig, adapt,
                      load_checkpoint, pretrain_source, sample_images)

log = logging.getLogger("fewshot_adapt")

RUN_ROOT_ENV = "FSADAPT_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --- config handling --------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config_file", f"not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config_file", "top level must be a mapping")
    return data


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"{p!r} is not a mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def _section(cfg, name, cls):
    try:
        return cls.from_dict(cfg.get(name) or {})
    except ConfigError as exc:
        raise ConfigError(f"{name}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from None


def _known(cfg, allowed, where="config"):
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}" if where != "config" else unknown[0], "unknown field")


def make_run_dir(cfg: dict, command: str) -> Path:
    if cfg.get("run_dir"):
        path = Path(cfg["run_dir"])
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = root / f"{command}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _shapeworld(cfg) -> ShapeWorldSpec:
    try:
        return ShapeWorldSpec(**(cfg or {}))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("shapeworld", str(exc)) from None


def _dataset(cfg: dict, image_size: int, channels: int, where: str) -> ImageDataset:
    kind = cfg.get("kind", "shapeworld")
    seed = cfg.get("seed", 0)
    if kind == "shapeworld":
        _known(cfg, {"kind", "seed", "spec", "chosen_modes", "k", "hue_shift"}, where)
        spec = _shapeworld(cfg.get("spec"))
        if "chosen_modes" in cfg:
            shift = cfg.get("hue_shift", 0.0)
            return make_fewshot_target(spec, cfg["chosen_modes"], cfg.get("k", 10),
                                       transform=(lambda x: hue_shift(x, shift)) if shift else None,
                                       rng=np.random.default_rng(seed))
        return make_shape_dataset(spec, np.random.default_rng(seed))
    if kind == "image_dir":
        _known(cfg, {"kind", "seed", "path", "limit"}, where)
        if "path" not in cfg:
            raise ConfigError(f"{where}.path", "required for image_dir datasets")
        return load_image_dir(cfg["path"], image_size, limit=cfg.get("limit", 10), seed=seed, channels=channels)
    raise ConfigError(f"{where}.kind", f"unknown dataset kind {kind!r}")


# --- commands ---------------------------------------------------------------

def cmd_pretrain(cfg: dict) -> Path:
    _known(cfg, {"run_dir", "model", "pretrain", "dataset"})
    model = _section(cfg, "model", ModelConfig)
    pcfg = _section(cfg, "pretrain", PretrainConfig)
    data = _dataset(cfg.get("dataset") or {}, model.image_size, model.channels, "dataset")
    run_dir = make_run_dir(cfg, "pretrain")
    _dump(run_dir / "resolved_config.json", {"model": model.to_dict(), "pretrain": pcfg.to_dict(),
                                             "dataset": cfg.get("dataset") or {}})
    pretrain_source(data, model, run_dir=run_dir, config=pcfg)
    return run_dir


def cmd_adapt(cfg: dict) -> Path:
    _known(cfg, {"run_dir", "source_checkpoint", "resume", "target", "adaptation"})
    acfg = _section(cfg, "adaptation", AdaptationConfig)
    if not cfg.get("source_checkpoint"):
        raise ConfigError("source_checkpoint", "required")
    src = load_checkpoint(cfg["source_checkpoint"])
    mc = src.model_config
    target = _dataset(cfg.get("target") or {}, mc.image_size, mc.channels, "target")
    resume = load_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    run_dir = make_run_dir(cfg, "adapt")
    _dump(run_dir / "resolved_config.json", {"adaptation": acfg.to_dict(), "target": cfg.get("target") or {},
                                             "source_checkpoint": str(cfg["source_checkpoint"]),
                                             "resume": cfg.get("resume"), "k": len(target)})
    adapt(src.generator, src.discriminator, target, acfg, run_dir=run_dir, resume=resume)
    return run_dir


def cmd_sample(ckpt, n, seed, out_path) -> Path:
    gen = load_checkpoint(ckpt).generator
    return save_image_grid(sample_images(gen, n, seed), out_path)


def cmd_correspond(source_ckpt, adapted_ckpt, n, seed, out_path, world: ShapeWorldSpec | None = None) -> Path:
    """Two-row grid: source outputs above adapted outputs, one shared latent per column."""
    src = load_checkpoint(source_ckpt).generator
    ada = load_checkpoint(adapted_ckpt).generator
    if src.latent_spec != ada.latent_spec:
        raise ValueError(f"latent specs differ: {src.latent_spec} vs {ada.latent_spec}")
    z = sample_prior(src.latent_spec, n, np.random.default_rng(seed))
    with torch.no_grad():
        top = generate(src, z)[0].numpy()
        bottom = generate(ada, z)[0].numpy()
    out_path = Path(out_path)
    save_image_grid(np.concatenate([top, bottom]), out_path, ncol=n)
    side = {"n": n, "seed": seed, "source_checkpoint": str(source_ckpt), "adapted_checkpoint": str(adapted_ckpt),
            "latents": z.vectors.tolist()}
    if world is not None:
        clf = ModeClassifier(world)
        side["source_modes"] = clf.predict(top).tolist()
        side["adapted_modes"] = clf.predict(bottom).tolist()
        side["correspondence"] = correspondence_score(top, bottom, world, classifier=clf)
    _dump(out_path.with_suffix(".json"), side)
    return out_path


def cmd_eval(adapted_ckpt, target_dir, full_dir=None, cfg: dict | None = None, out_path=None) -> dict:
    cfg = dict(cfg or {})
    _known(cfg, {"n_samples", "seed", "target_limit", "full_limit", "extractor", "nearest_k"})
    bundle = load_checkpoint(adapted_ckpt)
    mc = bundle.model_config
    n, seed = int(cfg.get("n_samples", 1000)), int(cfg.get("seed", 0))
    fx_cfg = cfg.get("extractor") or {}
    try:
        fx = FeatureExtractor(**fx_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError("extractor", str(exc)) from None
    target = load_image_dir(target_dir, mc.image_size, limit=cfg.get("target_limit", 1000), seed=0,
                            channels=mc.channels)
    fake = sample_images(bundle.generator, n, seed)
    div = intra_cluster_diversity(fake, target.images, fx)
    report = {
        "checkpoint": str(adapted_ckpt), "extractor": fx.kind, "seed": seed,
        "n_generated": n, "n_target": len(target),
        "metrics": {"intra_cluster_diversity": div.score,
                    "per_cluster": [None if np.isnan(v) else v for v in div.per_cluster],
                    "excluded_clusters": div.assignment.excluded_clusters},
    }
    ref = target
    if full_dir is not None:
        ref = load_image_dir(full_dir, mc.image_size, limit=cfg.get("full_limit", 1000), seed=0, channels=mc.channels)
        report["n_full"] = len(ref)
        fr, ff = fx(ref.images), fx(fake)
        report["metrics"]["frechet"] = frechet_distance(*feature_statistics(fr), *feature_statistics(ff))
    if len(ref) >= 2:
        d, c = density_coverage(fx(ref.images), fx(fake), nearest_k=int(cfg.get("nearest_k", 1)))
        report["metrics"].update(density=d, coverage=c)
    if out_path is not None:
        _dump(Path(out_path), report)
    return report


def cmd_testbed(scenario_name, seed, out_dir) -> dict:
    if scenario_name not in SCENARIOS:
        raise UsageError(f"unknown scenario {scenario_name!r}; choose from {sorted(SCENARIOS)}")
    sc = SCENARIOS[scenario_name]()
    if seed is not None:
        sc.seeds = (seed,)
    return run_ablation(sc, out_dir)


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fewshot-adapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config_file", nargs="?")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. adaptation.lambda=5000")
        return sp

    with_config(sub.add_parser("pretrain", help="train a toy source model"))
    with_config(sub.add_parser("adapt", help="adapt a source checkpoint to a few-shot target"))

    s = sub.add_parser("sample", help="render a grid of prior samples")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    c = sub.add_parser("correspond", help="source/adapted outputs for shared latents")
    c.add_argument("source_checkpoint")
    c.add_argument("adapted_checkpoint")
    c.add_argument("--n", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--shapeworld", action="store_true", help="score structural correspondence (default shape world)")

    e = with_config(sub.add_parser("eval", help="diversity / density / coverage / Frechet report"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target-dir", required=True)
    e.add_argument("--full-dir")
    e.add_argument("--out")

    t = sub.add_parser("testbed", help="run a packaged shape-world experiment")
    t.add_argument("scenario")
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("pretrain", "adapt", "eval"):
            cfg = apply_overrides(load_config(args.config_file), args.overrides)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg))
        elif args.command == "adapt":
            print(cmd_adapt(cfg))
        elif args.command == "sample":
            print(cmd_sample(args.checkpoint, args.n, args.seed, args.out))
        elif args.command == "correspond":
            world = ShapeWorldSpec() if args.shapeworld else None
            print(cmd_correspond(args.source_checkpoint, args.adapted_checkpoint, args.n, args.seed, args.out, world))
        elif args.command == "eval":
            out = args.out or (make_run_dir({}, "eval") / "report.json")
            print(json.dumps(cmd_eval(args.checkpoint, args.target_dir, args.full_dir, cfg, out), indent=2))
        elif args.command == "testbed":
            report = cmd_testbed(args.scenario, args.seed, args.out_dir)
            print(json.dumps({k: report[k] for k in ("gates", "passed")}, indent=2))
            if not report["passed"]:
                return EXIT_GATE
    except (ConfigError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
