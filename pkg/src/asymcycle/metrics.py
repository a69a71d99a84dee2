"""Distribution metrics (FID, KID) and per-image metrics (PSNR, SSIM)."""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .backends import pooled_features
from .data import IMAGE_EXTENSIONS, to_tensor


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationStats:
    mean: np.ndarray
    covariance: np.ndarray
    n_samples: int


@dataclass
class MetricReport:
    fid: float
    kid: float
    psnr_mean: float
    ssim_mean: float
    n_generated: int
    n_reference: int
    n_pairs: int
    backend_id: str
    pairing: str

    def to_json(self):
        data = asdict(self)
        for key in ("fid", "kid", "psnr_mean", "ssim_mean"):
            if math.isinf(data[key]):
                data[key] = "inf" if data[key] > 0 else "-inf"
            elif math.isnan(data[key]):
                data[key] = "nan"
        return json.dumps(data, indent=2)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        for key in ("fid", "kid", "psnr_mean", "ssim_mean"):
            data[key] = float(data[key])
        return cls(**data)

    def table(self):
        rows = [("FID", f"{self.fid:.4f}"), ("KID", f"{self.kid:.6f}"),
                ("PSNR (dB)", "inf" if math.isinf(self.psnr_mean) else f"{self.psnr_mean:.4f}"),
                ("SSIM", f"{self.ssim_mean:.4f}"),
                ("generated", str(self.n_generated)), ("reference", str(self.n_reference)),
                ("pairs", str(self.n_pairs)), ("pairing", self.pairing), ("backend", self.backend_id)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


# --- FID -------------------------------------------------------------------


def stats_from_features(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise MetricError("activation statistics need at least 2 feature vectors")
    return ActivationStats(features.mean(axis=0), np.cov(features, rowvar=False, ddof=1).reshape(
        features.shape[1], features.shape[1]), features.shape[0])


def compute_activation_stats(images, feature_backend):
    """Sample mean and unbiased covariance of pooled backend features."""
    if len(images) < 2:
        raise MetricError("activation statistics need at least 2 images")
    return stats_from_features(_pooled(images, feature_backend))


def _pooled(images, backend):
    param = next(backend.parameters())
    with torch.no_grad():
        feats = [pooled_features(backend, img.to(param.dtype)).double().cpu().numpy() for img in images]
    return np.concatenate(feats, axis=0)


def _psd_sqrt(matrix, name, tol):
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    if vals.min() < -tol:
        raise MetricError(f"{name} is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a, b):
    """‖μa-μb‖² + Tr(Σa + Σb - 2(Σa Σb)^½).

    The trace of the product root is taken as the sum of square roots of the
    eigenvalues of the symmetric PSD matrix ``Σa^½ Σb Σa^½``, which has the same
    spectrum as ``Σa Σb``.  Eigenvalues down to ``-1e-6·trace`` are treated as
    round-off and clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    ca, cb = np.atleast_2d(a.covariance), np.atleast_2d(b.covariance)
    tol = 1e-6 * max(np.trace(ca) + np.trace(cb), np.finfo(float).tiny)
    root_a = _psd_sqrt(ca, "first covariance", tol)
    _psd_sqrt(cb, "second covariance", tol)
    inner = root_a @ cb @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < -tol:
        raise MetricError(f"covariance product is not PSD (min eigenvalue {vals.min():.3e})")
    tr_covmean = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_covmean)


# --- KID -------------------------------------------------------------------


def _polynomial_kernel(u, v):
    return (u @ v.T / u.shape[1] + 1.0) ** 3


def mmd2_unbiased(fa, fb):
    """Unbiased squared MMD with the cubic polynomial kernel."""
    m, n = fa.shape[0], fb.shape[0]
    k_aa = _polynomial_kernel(fa, fa)
    k_bb = _polynomial_kernel(fb, fb)
    k_ab = _polynomial_kernel(fa, fb)
    sum_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    sum_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(sum_aa + sum_bb - 2.0 * k_ab.mean())


def kid(features_a, features_b, subset_size=1000, n_subsets=100, seed=0):
    """Kernel distance between two feature sets.

    Sets no larger than ``subset_size`` are compared in one exact estimate;
    larger sets average ``n_subsets`` estimates on random subsets.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise MetricError("kid needs two 2-D feature arrays with the same dimension")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise MetricError("kid needs at least 2 feature vectors per set")
    m = min(subset_size, fa.shape[0], fb.shape[0])
    if fa.shape[0] <= subset_size and fb.shape[0] <= subset_size:
        return mmd2_unbiased(fa, fb)
    rng = np.random.default_rng(seed)
    estimates = [
        mmd2_unbiased(fa[rng.choice(fa.shape[0], m, replace=False)], fb[rng.choice(fb.shape[0], m, replace=False)])
        for _ in range(n_subsets)
    ]
    return float(np.mean(estimates))


# --- PSNR / SSIM -------------------------------------------------------------


def psnr(a, b, data_range=255.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range ** 2 / mse))


def to_luma(image):
    """ITU-R BT.601 luma of an HxWx3 array; 2-D arrays pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def gaussian_window(size=11, sigma=1.5):
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ssim(a, b, data_range=255.0, win_size=11, sigma=1.5):
    """Mean SSIM over all fully-covered 11x11 Gaussian windows of the luma."""
    a, b = to_luma(a), to_luma(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise MetricError(f"image {a.shape} is smaller than the {win_size}x{win_size} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(win_size, sigma)
    half = win_size // 2

    def blur(t):
        t = ndimage.correlate1d(t, g, axis=0, mode="reflect")
        t = ndimage.correlate1d(t, g, axis=1, mode="reflect")
        return t[half:t.shape[0] - half, half:t.shape[1] - half]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --- folders -----------------------------------------------------------------


def list_images(folder):
    if not os.path.isdir(folder):
        raise MetricError(f"folder does not exist: {folder}")
    names = sorted(n for n in os.listdir(folder) if n.lower().endswith(IMAGE_EXTENSIONS))
    if not names:
        raise MetricError(f"no images found in {folder}")
    return names


def _read_rgb(path, size=None):
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != size:
            im = im.resize(size, Image.BILINEAR)
        return np.asarray(im)


def _features_for(folder, names, backend):
    images = [to_tensor(_read_rgb(os.path.join(folder, n))) for n in names]
    return _pooled(images, backend)


def evaluate_folder(generated_dir, reference_dir, backend, pairing="paired", sources_dir=None):
    """FID/KID between two folders plus mean PSNR/SSIM over filename-matched pairs.

    ``paired``: PSNR/SSIM between generated and reference images of the same
    name.  ``unpaired``: between each source image (``sources_dir``) and its
    translation in ``generated_dir``; sources are resized to the translation's
    size when they differ.
    """
    if pairing not in ("paired", "unpaired"):
        raise MetricError(f"pairing must be 'paired' or 'unpaired', got {pairing!r}")
    gen_names = list_images(generated_dir)
    ref_names = list_images(reference_dir)
    if pairing == "paired":
        pair_dir = reference_dir
        matched = sorted(set(gen_names) & set(ref_names))
        if not matched:
            raise MetricError("paired evaluation found no matching filenames")
    else:
        if sources_dir is None:
            raise MetricError("unpaired evaluation needs the source images folder")
        pair_dir = sources_dir
        matched = sorted(set(gen_names) & set(list_images(sources_dir)))
        if not matched:
            raise MetricError("no translated image matches a source filename")

    fg = _features_for(generated_dir, gen_names, backend)
    fr = _features_for(reference_dir, ref_names, backend)
    fid = frechet_distance(stats_from_features(fg), stats_from_features(fr)) if min(len(fg), len(fr)) >= 2 else math.nan
    kid_value = kid(fg, fr) if min(len(fg), len(fr)) >= 2 else math.nan

    psnrs, ssims = [], []
    for name in matched:
        gen = _read_rgb(os.path.join(generated_dir, name))
        other = _read_rgb(os.path.join(pair_dir, name), size=(gen.shape[1], gen.shape[0]))
        psnrs.append(psnr(gen, other))
        ssims.append(ssim(gen, other))
    return MetricReport(
        fid=fid, kid=kid_value, psnr_mean=float(np.mean(psnrs)), ssim_mean=float(np.mean(ssims)),
        n_generated=len(gen_names), n_reference=len(ref_names), n_pairs=len(matched),
        backend_id=backend.backend_id, pairing=pairing,
    )
