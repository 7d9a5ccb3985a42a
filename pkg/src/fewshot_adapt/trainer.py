"""Source pretraining and few-shot adaptation loops, checkpoints and run logs."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .data import ImageDataset, iterate_batches, save_image_grid
from .latent import AnchorSet, create_anchor_set, sample_anchor, sample_prior
from .losses import (LossReport, discriminator_parts, distance_consistency_loss, generator_parts,
                     total_generator_loss)
from .models import Discriminator, Generator, ModelConfig, build_models, clone_frozen, generate

log = logging.getLogger(__name__)

ITERATION_PRESETS = {"near": 1000, "stylized": 5000, "complex": 10000}
LAMBDA_RANGE = (0.0, 1e5)
RNG_STREAMS = ("data", "image", "patch", "dist")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class AdaptationConfig:
    lam: float = 1e3
    batch_size: int = 4
    iterations: int = 1000
    anchor_sigma: float = 0.05
    learning_rate: float = 2e-4
    adam_betas: tuple = (0.0, 0.99)
    dist_batch: int = 4
    seed: int = 0
    eval_every: int = 250
    checkpoint_every: int = 0
    literal_eq1: bool = False
    # False: image head on full-prior samples and no patch term
    relaxed_realism: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        self.validate()

    def validate(self):
        lo, hi = LAMBDA_RANGE
        if not lo <= self.lam <= hi:
            raise ConfigError("lambda", f"must lie in [{lo:g}, {hi:g}], got {self.lam}")
        for name, minimum in (("batch_size", 2), ("dist_batch", 2), ("iterations", 1)):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < minimum:
                raise ConfigError(name, f"must be an integer >= {minimum}, got {v!r}")
        if self.anchor_sigma < 0:
            raise ConfigError("anchor_sigma", f"must be nonnegative, got {self.anchor_sigma}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", f"must be positive, got {self.learning_rate}")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("adam_betas", f"must be two values in [0, 1), got {self.adam_betas}")
        for name in ("eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        return cls(**d)


class TrainRNG:
    """Independent named random streams spawned from one seed.

    Separate streams keep each consumer's draws fixed regardless of which
    other terms are enabled.
    """

    def __init__(self, seed: int = 0):
        children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
        self.streams = {n: np.random.default_rng(c) for n, c in zip(RNG_STREAMS, children)}

    def __getattr__(self, name):
        streams = self.__dict__.get("streams", {})
        if name in streams:
            return streams[name]
        raise AttributeError(name)

    def snapshot(self) -> dict:
        return {n: g.bit_generator.state for n, g in self.streams.items()}

    @classmethod
    def restore(cls, snap: dict) -> "TrainRNG":
        obj = cls.__new__(cls)
        obj.streams = {}
        for n in RNG_STREAMS:
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = snap[n]
            obj.streams[n] = g
        return obj


@dataclass
class CheckpointBundle:
    kind: str                      # "source" or "adapted"
    model_config: ModelConfig
    generator: Generator
    discriminator: Discriminator
    source: Generator | None = None
    anchors: AnchorSet | None = None
    config: AdaptationConfig | None = None
    step: int = 0
    rng: TrainRNG | None = None
    g_opt: torch.optim.Optimizer | None = None
    d_opt: torch.optim.Optimizer | None = None


def make_optimizers(gen, disc, lr, betas):
    return (torch.optim.Adam(gen.parameters(), lr=lr, betas=tuple(betas)),
            torch.optim.Adam(disc.parameters(), lr=lr, betas=tuple(betas)))


# --- checkpoint (de)serialisation -------------------------------------------

def _module_arrays(prefix, module):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_module(module, prefix, arrays):
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd, strict=True)


def _opt_arrays(prefix, opt):
    sd = opt.state_dict()
    arrays = {}
    for idx in sorted(sd["state"]):
        for key in sorted(sd["state"][idx]):
            val = sd["state"][idx][key]
            arrays[f"{prefix}/{idx}/{key}"] = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
    return arrays, sd["param_groups"]


def _load_opt(opt, prefix, arrays, groups):
    state = {}
    for name, val in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(val)
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    arrays = {}
    arrays.update(_module_arrays("G", bundle.generator))
    arrays.update(_module_arrays("D", bundle.discriminator))
    meta = {"kind": bundle.kind, "model_config": bundle.model_config.to_dict(), "step": int(bundle.step)}
    if bundle.source is not None:
        arrays.update(_module_arrays("S", bundle.source))
    if bundle.anchors is not None:
        arrays["anchors/base_points"] = bundle.anchors.base_points
        meta["anchors"] = {"sigma": bundle.anchors.sigma, "seed": bundle.anchors.seed}
    if bundle.config is not None:
        meta["config"] = bundle.config.to_dict()
    if bundle.rng is not None:
        meta["rng"] = bundle.rng.snapshot()
    for name in ("g_opt", "d_opt"):
        opt = getattr(bundle, name)
        if opt is not None:
            opt_arrays, groups = _opt_arrays(name, opt)
            arrays.update(opt_arrays)
            meta[name] = groups
    return checkpoint.write(path, meta, arrays)


def load_checkpoint(path) -> CheckpointBundle:
    meta, arrays = checkpoint.read(path)
    mc = ModelConfig.from_dict(meta["model_config"])
    gen, disc = Generator(mc), Discriminator(mc)
    _load_module(gen, "G", arrays)
    _load_module(disc, "D", arrays)
    bundle = CheckpointBundle(meta["kind"], mc, gen, disc, step=meta["step"])
    if any(k.startswith("S/") for k in arrays):
        src = Generator(mc)
        _load_module(src, "S", arrays)
        bundle.source = clone_frozen(src)
    if "anchors" in meta:
        bundle.anchors = AnchorSet(arrays["anchors/base_points"], **meta["anchors"])
    if "config" in meta:
        bundle.config = AdaptationConfig.from_dict(meta["config"])
    if "rng" in meta:
        bundle.rng = TrainRNG.restore(meta["rng"])
    if "g_opt" in meta:
        groups = meta["g_opt"]
        bundle.g_opt, bundle.d_opt = make_optimizers(gen, disc, groups[0]["lr"], groups[0]["betas"])
        _load_opt(bundle.g_opt, "g_opt", arrays, meta["g_opt"])
        _load_opt(bundle.d_opt, "d_opt", arrays, meta["d_opt"])
    return bundle


# --- run directory -----------------------------------------------------------

class RunLog:
    """Writes the run-directory layout: config snapshot, loss log, grids, checkpoints."""

    def __init__(self, run_dir):
        self.root = Path(run_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "samples").mkdir(exist_ok=True)
        (self.root / "checkpoints").mkdir(exist_ok=True)
        self.loss_path = self.root / "losses.jsonl"

    def write_config(self, payload: dict):
        (self.root / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def truncate_losses(self, step):
        """Drop log records past ``step`` (used when resuming)."""
        if not self.loss_path.exists():
            return
        keep = [ln for ln in self.loss_path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
        self.loss_path.write_text("".join(ln + "\n" for ln in keep))

    def append(self, record: dict):
        with self.loss_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def grid(self, tag, images):
        save_image_grid(images, self.root / "samples" / f"{tag}.png")

    def checkpoint(self, bundle, tag):
        return save_checkpoint(bundle, self.root / "checkpoints" / f"{tag}.ckpt")


def read_loss_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


# --- adaptation --------------------------------------------------------------

def _finite(*tensors):
    return all(bool(torch.isfinite(t).all()) for t in tensors)


def _check_grads(module, what):
    for name, p in module.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteError(f"non-finite gradient in {what} parameter {name}")


def init_adaptation(source_gen: Generator, source_disc: Discriminator, k: int,
                    config: AdaptationConfig) -> CheckpointBundle:
    gen = copy.deepcopy(source_gen)
    for p in gen.parameters():
        p.requires_grad_(True)
    gen.frozen = False
    gen.train()
    disc = copy.deepcopy(source_disc)
    for p in disc.parameters():
        p.requires_grad_(True)
    source = clone_frozen(source_gen)
    anchors = create_anchor_set(gen.latent_spec, k, config.seed, sigma=config.anchor_sigma)
    g_opt, d_opt = make_optimizers(gen, disc, config.learning_rate, config.adam_betas)
    return CheckpointBundle("adapted", source_gen.config, gen, disc, source=source, anchors=anchors,
                            config=config, step=0, rng=TrainRNG(config.seed), g_opt=g_opt, d_opt=d_opt)


def train_step(state: CheckpointBundle, real_batch, rng: TrainRNG | None = None):
    """One discriminator update on both heads, then one generator update.

    Per step this draws one anchor batch (image head), one prior batch
    (patch head) and one prior batch of ``dist_batch`` latents for the
    distance-consistency term, each from its own stream of ``rng``.
    """
    cfg = state.config
    rng = rng or state.rng
    gen, disc, spec = state.generator, state.discriminator, state.generator.latent_spec
    dtype = next(disc.parameters()).dtype
    real = torch.as_tensor(np.asarray(real_batch)).to(dtype)
    n = cfg.batch_size
    relaxed = cfg.relaxed_realism

    z_img = sample_anchor(state.anchors, n, rng.image) if relaxed else sample_prior(spec, n, rng.image)
    z_patch = sample_prior(spec, n, rng.patch) if relaxed else None
    z_dist = sample_prior(spec, cfg.dist_batch, rng.dist)

    state.d_opt.zero_grad(set_to_none=True)
    d_parts = discriminator_parts(gen, disc, z_img, z_patch, real, relaxed, cfg.literal_eq1)
    d_loss = d_parts.image + d_parts.patch
    if not _finite(d_loss):
        raise NonFiniteError(f"non-finite discriminator loss at step {state.step}")
    d_loss.backward()
    _check_grads(disc, "discriminator")
    state.d_opt.step()

    state.g_opt.zero_grad(set_to_none=True)
    g_parts = generator_parts(gen, disc, z_img, z_patch, relaxed, cfg.literal_eq1)
    with torch.no_grad():
        src_acts = generate(state.source, z_dist, with_taps=True)[1]
    if cfg.lam > 0:
        dist = distance_consistency_loss(src_acts, generate(gen, z_dist, with_taps=True)[1])
        g_loss = g_parts.image + g_parts.patch + cfg.lam * dist
    else:
        with torch.no_grad():
            dist = distance_consistency_loss(src_acts, generate(gen, z_dist, with_taps=True)[1])
        g_loss = g_parts.image + g_parts.patch
    if not _finite(g_loss, dist):
        raise NonFiniteError(f"non-finite generator loss at step {state.step}")
    g_loss.backward()
    _check_grads(gen, "generator")
    state.g_opt.step()

    state.step += 1
    report = total_generator_loss(g_parts, dist, cfg.lam)
    report.d_image, report.d_patch = d_parts.image.item(), d_parts.patch.item()
    return state, report


def sample_images(gen: Generator, n: int, seed: int, batch: int = 250) -> np.ndarray:
    """``n`` generations from the prior under a fixed seed, as a numpy array."""
    rng = np.random.default_rng(seed)
    z = sample_prior(gen.latent_spec, n, rng)
    out = []
    with torch.no_grad():
        for i in range(0, n, batch):
            out.append(generate(gen, z.vectors[i:i + batch])[0].numpy())
    return np.concatenate(out)


def adapt(source_gen: Generator, source_disc: Discriminator, target: ImageDataset,
          config: AdaptationConfig, run_dir=None, resume: CheckpointBundle | None = None) -> CheckpointBundle:
    """Fine-tune ``source_gen`` on ``target`` for ``config.iterations`` total steps.

    Passing ``resume`` continues a bundle from its recorded step; its
    ``config.iterations`` may be raised through ``config``.
    """
    if target is None or len(target) < 1:
        raise ValueError("target dataset must contain at least one image")
    if resume is None:
        state = init_adaptation(source_gen, source_disc, len(target), config)
    else:
        state = resume
        if state.anchors.k != len(target):
            raise ValueError(f"resumed anchor set has k={state.anchors.k} but target has {len(target)} images")
        state.config = config
    run = RunLog(run_dir) if run_dir is not None else None
    if run is not None:
        run.write_config({"adaptation": config.to_dict(), "model": state.model_config.to_dict(),
                          "target": {"k": len(target), "tags": list(target.tags)}})
        run.truncate_losses(state.step)
    grid_seed = config.seed + 10_000
    batches = iterate_batches(target, config.batch_size, state.rng.data)
    while state.step < config.iterations:
        real = next(batches)
        try:
            state, report = train_step(state, real, state.rng)
        except NonFiniteError:
            if run is not None:
                run.checkpoint(state, "diagnostic")
            raise
        if run is not None:
            run.append({"step": state.step, **report.to_dict()})
            if config.eval_every and state.step % config.eval_every == 0:
                run.grid(f"step_{state.step:06d}", sample_images(state.generator, 16, grid_seed))
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                run.checkpoint(state, f"step_{state.step:06d}")
    if run is not None:
        run.checkpoint(state, "final")
    return state


# --- source pretraining ------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-3
    adam_betas: tuple = (0.0, 0.99)
    r1_gamma: float = 1.0
    r1_every: int = 4
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps" if self.steps < 1 else "batch_size", "must be >= 1")
        if self.r1_gamma < 0 or self.r1_every < 1:
            raise ConfigError("r1_gamma", "r1_gamma must be >= 0 and r1_every >= 1")

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        return cls(**d)


def pretrain_source(dataset: ImageDataset, model_config: ModelConfig, steps: int | None = None,
                    run_dir=None, config: PretrainConfig | None = None):
    """Train a toy source GAN from scratch on ``dataset`` (non-saturating loss + lazy R1)."""
    import torch.nn.functional as F

    config = config or PretrainConfig()
    if steps is not None:
        config = PretrainConfig(**{**config.to_dict(), "steps": steps})
    if tuple(dataset.image_shape) != (model_config.channels, model_config.image_size, model_config.image_size):
        raise ValueError(f"dataset images {dataset.image_shape} do not match the model config")
    gen, disc = build_models(model_config, seed=config.seed)
    g_opt, d_opt = make_optimizers(gen, disc, config.learning_rate, config.adam_betas)
    rng = TrainRNG(config.seed)
    batches = iterate_batches(dataset, config.batch_size, rng.data)
    run = RunLog(run_dir) if run_dir is not None else None
    if run is not None:
        run.write_config({"pretrain": config.to_dict(), "model": model_config.to_dict(),
                          "dataset": {"size": len(dataset)}})
    spec = gen.latent_spec
    for step in range(1, config.steps + 1):
        real = torch.from_numpy(next(batches))
        z = sample_prior(spec, config.batch_size, rng.image)
        d_opt.zero_grad(set_to_none=True)
        with torch.no_grad():
            fake = generate(gen, z)[0]
        d_real = disc(real, image=True, patch=False)[0]
        d_loss = F.softplus(-d_real).mean() + F.softplus(disc(fake, image=True, patch=False)[0]).mean()
        d_loss.backward()
        if config.r1_gamma > 0 and step % config.r1_every == 0:
            real_r1 = real.detach().requires_grad_(True)
            out = disc(real_r1, image=True, patch=False)[0]
            (grad,) = torch.autograd.grad(out.sum(), real_r1, create_graph=True)
            r1 = grad.pow(2).flatten(1).sum(1).mean()
            (config.r1_gamma / 2 * r1 * config.r1_every).backward()
        d_opt.step()

        g_opt.zero_grad(set_to_none=True)
        g_loss = F.softplus(-disc(generate(gen, z)[0], image=True, patch=False)[0]).mean()
        g_loss.backward()
        g_opt.step()
        if not math.isfinite(d_loss.item()) or not math.isfinite(g_loss.item()):
            raise NonFiniteError(f"non-finite pretraining loss at step {step}")
        if run is not None:
            run.append({"step": step, "d_loss": d_loss.item(), "g_loss": g_loss.item()})
    gen.eval()
    if run is not None:
        bundle = CheckpointBundle("source", model_config, gen, disc, step=config.steps)
        run.checkpoint(bundle, "source")
        run.grid("source", sample_images(gen, 64, config.seed + 10_000))
    return gen, disc
