"""Unpaired image folders, preprocessing and batch sampling."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class PreprocessConfig:
    base_size: int = 512
    expand_size: int = 588
    crop_size: int = 512
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.crop_size < 1:
            raise ValueError("crop_size must be >= 1")
        if self.expand_size < self.crop_size:
            raise ValueError("expand_size must be >= crop_size")
        if self.base_size < 1:
            raise ValueError("base_size must be >= 1")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be a probability")

    @classmethod
    def from_config(cls, config):
        return cls(
            base_size=config["data.base_size"],
            expand_size=config["data.expand_size"],
            crop_size=config["data.crop_size"],
            hflip_prob=config["data.hflip_prob"],
            seed=config["seed"],
        )


@dataclass(frozen=True)
class DomainDataset:
    root_path: str
    image_paths: tuple
    domain_tag: str
    split: str = "train"
    skipped: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.image_paths)

    def load(self, index):
        return Image.open(self.image_paths[index]).convert("RGB")


def load_domain_folder(path, domain_tag, split="train"):
    """Collect the decodable PNG/JPEG images of a folder in filename order.

    Non-image files and images that fail to decode are skipped and counted in
    ``dataset.skipped``.
    """
    if domain_tag not in ("X", "Y"):
        raise ValueError(f"domain_tag must be 'X' or 'Y', got {domain_tag!r}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"image folder does not exist: {path}")

    paths, skipped = [], 0
    for name in sorted(os.listdir(path)):
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        if not name.lower().endswith(IMAGE_EXTENSIONS):
            skipped += 1
            continue
        try:
            with Image.open(full) as im:
                im.verify()
        except (UnidentifiedImageError, OSError):
            skipped += 1
            continue
        paths.append(full)
    if skipped:
        log.warning("skipped %d non-image or unreadable file(s) in %s", skipped, path)
    if not paths:
        raise ValueError(f"no images found in {path}")
    return DomainDataset(path, tuple(paths), domain_tag, split, skipped)


def _as_pil(raw_image):
    if isinstance(raw_image, Image.Image):
        image = raw_image
    else:
        array = np.asarray(raw_image)
        if array.ndim == 2:
            array = np.stack([array] * 3, axis=-1)
        if array.dtype != np.uint8:
            array = np.clip(np.rint(array), 0, 255).astype(np.uint8)
        image = Image.fromarray(array)
    if image.width == 0 or image.height == 0:
        raise ValueError("degenerate image with a zero dimension")
    return image.convert("RGB")


def to_tensor(image):
    """8-bit RGB image -> float32 tensor 3xHxW scaled to [-1, 1]."""
    array = np.asarray(image, dtype=np.float32)
    tensor = torch.from_numpy(array.transpose(2, 0, 1).copy())
    return tensor / 127.5 - 1.0


def preprocess(raw_image, config, rng, train=True):
    """Resize, augment and normalize one image.

    Training: resize to ``base_size``, then to ``expand_size``, random crop of
    ``crop_size``, horizontal flip with ``hflip_prob``.  Evaluation
    (``train=False``): resize to ``base_size`` and center-crop ``crop_size``
    (resizing up first when ``base_size < crop_size``); ``rng`` is unused.
    """
    image = _as_pil(raw_image)
    size = config.crop_size
    if train:
        image = image.resize((config.base_size, config.base_size), Image.BILINEAR)
        image = image.resize((config.expand_size, config.expand_size), Image.BILINEAR)
        top = int(rng.integers(0, config.expand_size - size + 1))
        left = int(rng.integers(0, config.expand_size - size + 1))
        image = image.crop((left, top, left + size, top + size))
        if rng.random() < config.hflip_prob:
            image = image.transpose(Image.FLIP_LEFT_RIGHT)
    else:
        side = max(config.base_size, size)
        image = image.resize((side, side), Image.BILINEAR)
        offset = (side - size) // 2
        image = image.crop((offset, offset, offset + size, offset + size))
    return to_tensor(image)


def denormalize(t):
    """Map a [-1, 1] tensor (3xHxW or HxW) to an HxWx3 / HxW uint8 array."""
    t = torch.as_tensor(t).detach().to(torch.float64).cpu()
    if t.min() < -1.0 or t.max() > 1.0:
        log.warning("denormalize: values outside [-1, 1] were clamped")
        t = t.clamp(-1.0, 1.0)
    scaled = (t + 1.0) * 127.5
    # Round half away from zero; values are non-negative here.
    pixels = torch.floor(scaled + 0.5).clamp(0, 255).to(torch.uint8).numpy()
    if pixels.ndim == 3:
        pixels = pixels.transpose(1, 2, 0)
    return pixels


class UnpairedSampler:
    """Independent draws from two domains.

    Each domain keeps its own index queue, refilled with a fresh permutation
    whenever it runs out, and its own RNG stream for both ordering and
    augmentation.  One epoch is ``max(len(X), len(Y))`` draws, so the larger
    domain is visited exactly once per epoch and the smaller one cycles.
    """

    def __init__(self, ds_x, ds_y, config, seed=None, workers=1):
        self.ds_x, self.ds_y, self.config = ds_x, ds_y, config
        self.workers = workers
        seq = np.random.SeedSequence(config.seed if seed is None else seed)
        seq_x, seq_y = seq.spawn(2)
        self.rngs = {"X": np.random.default_rng(seq_x), "Y": np.random.default_rng(seq_y)}
        self.queues = {"X": [], "Y": []}

    @property
    def epoch_length(self):
        return max(len(self.ds_x), len(self.ds_y))

    def _next_index(self, tag):
        ds = self.ds_x if tag == "X" else self.ds_y
        queue = self.queues[tag]
        if not queue:
            queue.extend(int(i) for i in self.rngs[tag].permutation(len(ds)))
        return queue.pop(0)

    def next_indices(self):
        return self._next_index("X"), self._next_index("Y")

    def next_batch(self, batch_size=1):
        """Return ``(x, y, (x_indices, y_indices))`` with x, y of shape Nx3xSxS."""
        xs, ys, ix, iy = [], [], [], []
        for _ in range(batch_size):
            i, j = self.next_indices()
            ix.append(i)
            iy.append(j)
        # Crop/flip draws are taken here, in order, so parallel decoding stays deterministic.
        x_images = self._load_all(self.ds_x, ix)
        y_images = self._load_all(self.ds_y, iy)
        for image in x_images:
            xs.append(preprocess(image, self.config, self.rngs["X"]))
        for image in y_images:
            ys.append(preprocess(image, self.config, self.rngs["Y"]))
        return torch.stack(xs), torch.stack(ys), (ix, iy)

    def _load_all(self, ds, indices):
        if self.workers > 1 and len(indices) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(ds.load, indices))
        return [ds.load(i) for i in indices]

    def state_dict(self):
        return {
            "rng_x": self.rngs["X"].bit_generator.state,
            "rng_y": self.rngs["Y"].bit_generator.state,
            "queue_x": list(self.queues["X"]),
            "queue_y": list(self.queues["Y"]),
        }

    def load_state_dict(self, state):
        self.rngs["X"].bit_generator.state = state["rng_x"]
        self.rngs["Y"].bit_generator.state = state["rng_y"]
        self.queues = {"X": list(state["queue_x"]), "Y": list(state["queue_y"])}


def sample_unpaired_batch(ds_x, ds_y, config, rng):
    """Draw one independent (x, y) pair with independent augmentations.

    ``rng`` is a ``numpy.random.Generator``; two child streams are spawned from
    it so the X and Y draws never share state.  For epoch-structured training
    use :class:`UnpairedSampler`.
    """
    rx, ry = rng.spawn(2)
    x = preprocess(ds_x.load(int(rx.integers(len(ds_x)))), config, rx)
    y = preprocess(ds_y.load(int(ry.integers(len(ds_y)))), config, ry)
    return x, y


def load_eval_images(paths, config, workers=1):
    """Evaluation-mode tensors for a list of image paths (order preserved)."""

    def work(path):
        with Image.open(path) as im:
            return preprocess(im.convert("RGB"), config, None, train=False)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(work, paths))
    return [work(p) for p in paths]
