"""Alternating adversarial optimization, checkpoints and run directories."""

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import __version__
from . import config as cfg
from .backends import load_backend
from .data import PreprocessConfig, UnpairedSampler, load_domain_folder, load_eval_images
from .discriminators import DiscriminatorSpec, build_patch_discriminator
from .generators import GeneratorSpec, build_dense_fusion_generator, build_residual_generator
from .losses import LossReport, LossWeights, NonFiniteLossError, generator_terms, lsgan_d_loss

log = logging.getLogger(__name__)

NET_NAMES = ("G", "F", "D_X", "D_Y")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    init_std: float = 0.02
    buffer_size: int = 50
    lr_decay: str = "none"
    seed: int = 0
    checkpoint_every: int = 1
    update_order: str = "g_then_d"
    identity_mode: str = "output_domain"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.buffer_size < 0:
            raise ValueError("batch_size must be >= 1 and buffer_size >= 0")

    @classmethod
    def from_config(cls, config):
        return cls(
            epochs=config["train.epochs"],
            batch_size=config["train.batch_size"],
            lr=config["train.lr"],
            adam_beta1=config["train.adam_beta1"],
            adam_beta2=config["train.adam_beta2"],
            init_std=config["train.init_std"],
            buffer_size=config["train.buffer_size"],
            lr_decay=config["train.lr_decay"],
            seed=config["seed"],
            checkpoint_every=config["train.checkpoint_every"],
            update_order=config["train.update_order"],
            identity_mode=config["loss.identity_mode"],
        )


def init_weights(net, std=0.02, rng=None):
    """Conv weights ~ N(0, std²), norm scales ~ N(1, std²), all biases 0."""
    if rng is None or isinstance(rng, int):
        rng = torch.Generator().manual_seed(0 if rng is None else rng)
    with torch.no_grad():
        for module in net.modules():
            name = type(module).__name__
            if "Conv" in name or name == "Linear":
                module.weight.normal_(0.0, std, generator=rng)
                if module.bias is not None:
                    module.bias.zero_()
            elif "Norm" in name and getattr(module, "weight", None) is not None:
                module.weight.normal_(1.0, std, generator=rng)
                module.bias.zero_()
    return net


class ImagePool:
    """History of generated images replayed to the discriminator.

    Until full, every new image is stored and returned.  Afterwards each new
    image is, with probability ½, swapped for a uniformly chosen stored one
    (which is returned), otherwise returned directly.  Capacity 0 passes images
    through unchanged.
    """

    def __init__(self, capacity, seed=0):
        self.capacity = capacity
        self.images = []
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.images)

    def query(self, images):
        if self.capacity == 0:
            return images
        out = []
        for image in images.detach():
            image = image.unsqueeze(0)
            if len(self.images) < self.capacity:
                self.images.append(image.clone())
                out.append(image)
            elif self.rng.random() > 0.5:
                idx = int(self.rng.integers(self.capacity))
                out.append(self.images[idx].clone())
                self.images[idx] = image.clone()
            else:
                out.append(image)
        return torch.cat(out, dim=0)

    def state_dict(self):
        return {"images": list(self.images), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state):
        self.images = [t.clone() for t in state["images"]]
        self.rng.bit_generator.state = state["rng"]


@dataclass
class TrainState:
    nets: dict
    opt_gen: torch.optim.Optimizer
    opt_dx: torch.optim.Optimizer
    opt_dy: torch.optim.Optimizer
    schedulers: list
    pool_x: ImagePool
    pool_y: ImagePool
    train_config: TrainConfig
    config: dict = field(default_factory=dict)
    epoch: int = 0
    iteration: int = 0
    sampler_state: dict = None

    @property
    def generator_parameters(self):
        return [*self.nets["G"].parameters(), *self.nets["F"].parameters()]


def build_networks(config):
    gspec = GeneratorSpec.from_config(config)
    dspec = DiscriminatorSpec.from_config(config)
    return {
        "G": build_dense_fusion_generator(gspec),
        "F": build_residual_generator(gspec),
        "D_X": build_patch_discriminator(dspec),
        "D_Y": build_patch_discriminator(dspec),
    }


def _dtype(config):
    return torch.float64 if config.get("train.dtype") == "float64" else torch.float32


def build_state(config):
    """Fresh networks (initialized from the config seed), optimizers and buffers."""
    tc = TrainConfig.from_config(config)
    nets = build_networks(config)
    gen = torch.Generator().manual_seed(tc.seed)
    for name in NET_NAMES:
        init_weights(nets[name], tc.init_std, gen)
        nets[name].to(_dtype(config))
    betas = (tc.adam_beta1, tc.adam_beta2)
    opt_gen = torch.optim.Adam([*nets["G"].parameters(), *nets["F"].parameters()], lr=tc.lr, betas=betas)
    opt_dx = torch.optim.Adam(nets["D_X"].parameters(), lr=tc.lr, betas=betas)
    opt_dy = torch.optim.Adam(nets["D_Y"].parameters(), lr=tc.lr, betas=betas)
    schedulers = []
    if tc.lr_decay == "linear_after_half":
        half = tc.epochs // 2

        def factor(epoch):
            return 1.0 - max(0, epoch + 1 - half) / float(tc.epochs - half + 1)

        schedulers = [torch.optim.lr_scheduler.LambdaLR(o, factor) for o in (opt_gen, opt_dx, opt_dy)]
    seeds = np.random.SeedSequence([tc.seed, 7]).generate_state(2)
    return TrainState(
        nets=nets, opt_gen=opt_gen, opt_dx=opt_dx, opt_dy=opt_dy, schedulers=schedulers,
        pool_x=ImagePool(tc.buffer_size, int(seeds[0])), pool_y=ImagePool(tc.buffer_size, int(seeds[1])),
        train_config=tc, config=dict(config),
    )


def _set_requires_grad(nets, flag):
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _generator_update(state, x, y, w, backends):
    nets = state.nets
    _set_requires_grad([nets["D_X"], nets["D_Y"]], False)
    try:
        state.opt_gen.zero_grad(set_to_none=True)
        total, terms, fakes = generator_terms(nets, x, y, backends, w, state.train_config.identity_mode)
        total.backward()
        state.opt_gen.step()
    finally:
        _set_requires_grad([nets["D_X"], nets["D_Y"]], True)
    return terms, fakes


def _discriminator_update(state, x, y, g_x, f_y):
    nets = state.nets
    fake_y = state.pool_y.query(g_x.detach())
    state.opt_dy.zero_grad(set_to_none=True)
    d_y = lsgan_d_loss(nets["D_Y"](y), nets["D_Y"](fake_y))
    d_y.backward()
    state.opt_dy.step()

    fake_x = state.pool_x.query(f_y.detach())
    state.opt_dx.zero_grad(set_to_none=True)
    d_x = lsgan_d_loss(nets["D_X"](x), nets["D_X"](fake_x))
    d_x.backward()
    state.opt_dx.step()
    return d_x.item(), d_y.item()


def training_step(state, x, y, w, backends):
    """One generator update and one update of each discriminator.

    ``x`` and ``y`` are Nx3xHxW batches from domains X and Y.  Returns
    ``(state, LossReport)``; the state is updated in place.
    """
    dtype = next(state.nets["G"].parameters()).dtype
    x, y = x.to(dtype), y.to(dtype)
    if state.train_config.update_order == "g_then_d":
        terms, fakes = _generator_update(state, x, y, w, backends)
        d_x, d_y = _discriminator_update(state, x, y, fakes["g_x"], fakes["f_y"])
    else:
        with torch.no_grad():
            g_x, f_y = state.nets["G"](x), state.nets["F"](y)
        d_x, d_y = _discriminator_update(state, x, y, g_x, f_y)
        terms, _ = _generator_update(state, x, y, w, backends)
    state.iteration += 1
    report = LossReport(d_x=d_x, d_y=d_y, **{k: terms[k].item() for k in LossReport.FIELDS[2:]})
    for name in ("d_x", "d_y"):
        value = getattr(report, name)
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
    return state, report


# --- checkpoints -----------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def _manifest_for(state):
    return {
        "epoch": state.epoch,
        "iteration": state.iteration,
        "config_digest": cfg.digest(state.config),
        "seed": state.config.get("seed"),
        "artifact_version": __version__,
    }


def save_checkpoint(state, path):
    """Write ``path/state.pt`` and ``path/manifest.json``."""
    os.makedirs(path, exist_ok=True)
    manifest = _manifest_for(state)
    payload = {
        "manifest": manifest,
        "config": state.config,
        "nets": {name: net.state_dict() for name, net in state.nets.items()},
        "opt_gen": state.opt_gen.state_dict(),
        "opt_dx": state.opt_dx.state_dict(),
        "opt_dy": state.opt_dy.state_dict(),
        "schedulers": [s.state_dict() for s in state.schedulers],
        "pool_x": state.pool_x.state_dict(),
        "pool_y": state.pool_y.state_dict(),
        "sampler": state.sampler_state,
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    blob = buffer.getvalue()
    with open(os.path.join(path, "state.pt"), "wb") as fh:
        fh.write(blob)
    manifest = dict(manifest, state_sha256=hashlib.sha256(blob).hexdigest())
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def read_checkpoint(path):
    """Verified ``(manifest, payload)`` of a checkpoint directory."""
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(path, "state.pt"), "rb") as fh:
            blob = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {exc}") from exc
    if manifest.get("state_sha256") != hashlib.sha256(blob).hexdigest():
        raise CheckpointError(f"checkpoint {path!r}: state file does not match its manifest digest")
    try:
        payload = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path!r} is corrupt: {exc}") from exc
    recorded = {k: v for k, v in manifest.items() if k != "state_sha256"}
    if recorded != payload["manifest"]:
        raise CheckpointError(f"checkpoint {path!r}: manifest.json was modified after saving")
    if cfg.digest(payload["config"]) != manifest["config_digest"]:
        raise CheckpointError(f"checkpoint {path!r}: stored config does not match its digest")
    return manifest, payload


def load_checkpoint(path, config=None, allow_mismatch=False):
    """Restore a :class:`TrainState`.

    If ``config`` is given its digest must match the checkpoint's, and the
    artifact version must match this package, unless ``allow_mismatch``.
    """
    manifest, payload = read_checkpoint(path)
    if not allow_mismatch:
        if manifest["artifact_version"] != __version__:
            raise CheckpointError(
                f"checkpoint written by version {manifest['artifact_version']}, this is {__version__}")
        if config is not None and cfg.digest(config) != manifest["config_digest"]:
            raise CheckpointError("checkpoint config digest differs from the requested config")
    state = build_state(payload["config"])
    for name, net in state.nets.items():
        net.load_state_dict(payload["nets"][name])
    state.opt_gen.load_state_dict(payload["opt_gen"])
    state.opt_dx.load_state_dict(payload["opt_dx"])
    state.opt_dy.load_state_dict(payload["opt_dy"])
    for sched, sd in zip(state.schedulers, payload["schedulers"]):
        sched.load_state_dict(sd)
    state.pool_x.load_state_dict(payload["pool_x"])
    state.pool_y.load_state_dict(payload["pool_y"])
    state.epoch = manifest["epoch"]
    state.iteration = manifest["iteration"]
    state.sampler_state = payload["sampler"]
    return state


def load_generators(path, allow_mismatch=False):
    """``(config, {"G": ..., "F": ...})`` from a checkpoint, in eval mode."""
    state = load_checkpoint(path, allow_mismatch=allow_mismatch)
    for net in state.nets.values():
        net.eval()
    return state.config, state.nets


# --- runs ------------------------------------------------------------------


def load_backends(config):
    dtype = _dtype(config)
    out = {}
    for role in ("feature", "edge", "distance"):
        path = config[f"backends.{role}.path"] or None
        out[role] = load_backend(config[f"backends.{role}.kind"], path).to(dtype)
    return out


def load_datasets(config):
    for key in ("data.x_dir", "data.y_dir"):
        if not config[key] or not os.path.isdir(config[key]):
            raise cfg.ConfigError(f"data directory {config[key]!r} does not exist", key)
    return load_domain_folder(config["data.x_dir"], "X"), load_domain_folder(config["data.y_dir"], "Y")


def _sample_sources(config, ds, test_key):
    n = config["train.n_samples"]
    if n <= 0:
        return None
    if config[test_key] and os.path.isdir(config[test_key]):
        ds = load_domain_folder(config[test_key], ds.domain_tag, "test")
    pre = PreprocessConfig.from_config(config)
    return torch.stack(load_eval_images(ds.image_paths[:n], pre, config["data.workers"]))


LOSS_COLUMNS = ("epoch",) + LossReport.FIELDS + ("wall_time",)
STEP_COLUMNS = ("epoch", "iteration") + LossReport.FIELDS


def _append_csv(path, columns, rows):
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def read_csv(path):
    """Rows of a loss file as dicts of floats (``epoch``/``iteration`` as ints)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: int(v) if k in ("epoch", "iteration") else float(v) for k, v in row.items()})
        return rows


def train(config, run_dir=None, data=None, backends=None, resume=None, allow_mismatch=False):
    """Run ``train.epochs`` epochs and return the run directory.

    ``data`` is an optional ``(ds_x, ds_y)`` pair, ``backends`` an optional
    dict of loaded backends; both default to what the config names.  ``resume``
    is a checkpoint directory to continue from.
    """
    from .plotting import plot_loss_curves, save_sample_grid

    if run_dir is None:
        root = os.environ.get("ASYMCYCLE_RUN_ROOT", config["run.out_dir"])
        run_dir = os.path.join(root, config["run.name"])
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(run_dir, "samples"), exist_ok=True)
    with open(os.path.join(run_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps(config))
    cfg.RunManifest.create("train", config).write(os.path.join(run_dir, "manifest.json"))

    ds_x, ds_y = data if data is not None else load_datasets(config)
    backends = backends if backends is not None else load_backends(config)
    weights = LossWeights.from_config(config)
    pre = PreprocessConfig.from_config(config)
    sampler = UnpairedSampler(ds_x, ds_y, pre, workers=config["data.workers"])

    if resume is not None:
        state = load_checkpoint(resume, config, allow_mismatch=allow_mismatch)
        state.config = dict(config)
        sampler.load_state_dict(state.sampler_state)
    else:
        state = build_state(config)
    tc = state.train_config
    steps = config["train.steps_per_epoch"] or max(1, sampler.epoch_length // tc.batch_size)

    sources_x = _sample_sources(config, ds_x, "data.x_test_dir")
    sources_y = _sample_sources(config, ds_y, "data.y_test_dir")
    losses_path = os.path.join(run_dir, "losses.csv")
    steps_path = os.path.join(run_dir, "steps.csv")

    for epoch in range(state.epoch + 1, tc.epochs + 1):
        start = time.perf_counter()
        for net in state.nets.values():
            net.train()
        reports = []
        for _ in range(steps):
            x, y, _ = sampler.next_batch(tc.batch_size)
            state, report = training_step(state, x, y, weights, backends)
            reports.append(report)
        for sched in state.schedulers:
            sched.step()
        state.epoch = epoch
        state.sampler_state = sampler.state_dict()

        _append_csv(steps_path, STEP_COLUMNS, [
            dict(r.as_dict(), epoch=epoch, iteration=state.iteration - steps + i + 1)
            for i, r in enumerate(reports)])
        row = {f: float(np.mean([getattr(r, f) for r in reports])) for f in LossReport.FIELDS}
        row.update(epoch=epoch, wall_time=time.perf_counter() - start)
        _append_csv(losses_path, LOSS_COLUMNS, [row])
        log.info("epoch %d/%d total=%.4f d_x=%.4f d_y=%.4f", epoch, tc.epochs, row["total"], row["d_x"], row["d_y"])

        if sources_x is not None:
            save_sample_grid(state.nets, sources_x, sources_y, os.path.join(run_dir, "samples", f"epoch_{epoch:03d}.png"))
        plot_loss_curves(read_csv(losses_path), os.path.join(run_dir, "loss_curves.png"))
        if epoch % tc.checkpoint_every == 0 or epoch == tc.epochs:
            save_checkpoint(state, os.path.join(run_dir, "checkpoints", f"epoch_{epoch:03d}"))
    return run_dir
