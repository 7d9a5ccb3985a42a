"""Packaged shape-world experiments: pretrain a source, adapt with and without
the distance-consistency term, and compare diversity and correspondence."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import FeatureExtractor, intra_cluster_diversity
from .models import ModelConfig
from .synthetic import (ModeClassifier, ShapeWorldSpec, correspondence_score, hue_shift,
                        REJECT, make_fewshot_target, make_shape_dataset, mode_coverage)
from .trainer import (AdaptationConfig, PretrainConfig, adapt, load_checkpoint, pretrain_source,
                      sample_images)

log = logging.getLogger(__name__)


@dataclass
class AblationScenario:
    seeds: tuple = (0, 1, 2)
    source_seed: int = 0
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=3000))
    model: ModelConfig = field(default_factory=ModelConfig)
    world: ShapeWorldSpec = field(default_factory=ShapeWorldSpec)
    n_target_modes: int = 3
    k: int = 10
    hue: float = 0.5
    lam: float = 1e3
    iterations: int = 1000
    n_eval: int = 1000
    coverage_gate: float = 7 / 8


SCENARIOS = {
    "ablate-dist": AblationScenario,
    "smoke": lambda: AblationScenario(seeds=(0,), pretrain=PretrainConfig(steps=50), iterations=20,
                                      n_eval=100, coverage_gate=0.0),
}


def get_or_pretrain_source(sc: AblationScenario, out_dir: Path):
    """Reuse ``out_dir/source/checkpoints/source.ckpt`` when present."""
    ckpt = out_dir / "source" / "checkpoints" / "source.ckpt"
    if ckpt.exists():
        b = load_checkpoint(ckpt)
        return b.generator, b.discriminator
    data = make_shape_dataset(sc.world, np.random.default_rng(sc.source_seed))
    cfg = PretrainConfig(**{**sc.pretrain.to_dict(), "seed": sc.source_seed})
    return pretrain_source(data, sc.model, run_dir=out_dir / "source", config=cfg)


def evaluate_against_source(source, adapted, target, sc: AblationScenario, clf, fx, seed):
    src = sample_images(source, sc.n_eval, seed)
    ada = sample_images(adapted, sc.n_eval, seed)
    div = intra_cluster_diversity(ada, target.images, fx)
    return {
        "diversity": div.score,
        "excluded_clusters": div.assignment.excluded_clusters,
        "correspondence": correspondence_score(src, ada, sc.world, classifier=clf),
        "mode_coverage": mode_coverage(ada, sc.world, classifier=clf),
        # share of adapted samples matching no mode template
        "reject_fraction": float(np.mean(clf.predict(ada) == REJECT)),
    }


def run_ablation(sc: AblationScenario, out_dir) -> dict:
    """Full method vs. lambda=0 on each seed; returns the comparison record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    source, source_disc = get_or_pretrain_source(sc, out_dir)
    clf = ModeClassifier(sc.world)
    fx = FeatureExtractor()
    eval_seed = 12345
    src_cov = mode_coverage(sample_images(source, sc.n_eval, eval_seed), sc.world, classifier=clf)
    rows = []
    for seed in sc.seeds:
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(sc.world.modes), sc.n_target_modes, replace=False).tolist())
        target = make_fewshot_target(sc.world, chosen, sc.k, transform=lambda x: hue_shift(x, sc.hue), rng=rng)
        row = {"seed": seed, "target_modes": chosen}
        for name, lam in (("full", sc.lam), ("no_dist", 0.0)):
            cfg = AdaptationConfig(lam=lam, iterations=sc.iterations, seed=seed, eval_every=0)
            bundle = adapt(source, source_disc, target, cfg, run_dir=out_dir / f"seed{seed}" / name)
            row[name] = evaluate_against_source(source, bundle.generator, target, sc, clf, fx, eval_seed)
            log.info("seed %d %s: %s", seed, name, row[name])
        rows.append(row)
    div_wins = sum(r["full"]["diversity"] > r["no_dist"]["diversity"] for r in rows)
    corr_wins = sum(r["full"]["correspondence"] > r["no_dist"]["correspondence"] for r in rows)
    n = len(rows)
    gates = {
        "source_coverage": src_cov >= sc.coverage_gate,
        "diversity": div_wins == n,
        "correspondence": corr_wins >= (2 * n + 2) // 3,
    }
    report = {
        "scenario": "ablate-dist",
        "source_coverage": src_cov,
        "runs": rows,
        "diversity_wins": div_wins,
        "correspondence_wins": corr_wins,
        "gates": gates,
        "passed": all(gates.values()),
        "seconds": time.time() - t0,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report
