"""Objective terms.

Expectations are realized as means over batch and elements, which keeps the
loss weights independent of image resolution.
"""

import math
from dataclasses import asdict, dataclass

import torch

from .backends import (
    DISTANCE_KINDS, EDGE_KINDS, FEATURE_KINDS, BackendError,
    edges_as_image, extract_edges, extract_features, perceptual_distance,
)


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_dual: float = 10.0
    lambda_id: float = 5.0
    mu: float = 1.0
    use_identity: bool = True
    use_semantic: bool = True
    use_feature: bool = True

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_dual", "lambda_id", "mu"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def from_config(cls, config):
        return cls(
            lambda_gan=config["loss.lambda_gan"],
            lambda_dual=config["loss.lambda_dual"],
            lambda_id=config["loss.lambda_id"],
            mu=config["loss.mu"],
            use_identity=config["loss.use_identity"],
            use_semantic=config["loss.use_semantic"],
            use_feature=config["loss.use_feature"],
        )


@dataclass
class LossReport:
    d_x: float
    d_y: float
    g_adv: float
    f_adv: float
    feature: float
    semantic: float
    dual: float
    identity: float
    total: float

    FIELDS = ("d_x", "d_y", "g_adv", "f_adv", "feature", "semantic", "dual", "identity", "total")

    def as_dict(self):
        return asdict(self)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"non-finite value {value} in loss term {term!r}")
        self.term = term


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NonFiniteLossError(name, "in input scores")


def lsgan_d_loss(real_scores, fake_scores):
    """Discriminator side: ½·mean[(real-1)²] + ½·mean[fake²]."""
    _check_finite("real_scores", real_scores)
    _check_finite("fake_scores", fake_scores)
    return 0.5 * torch.mean((real_scores - 1.0) ** 2) + 0.5 * torch.mean(fake_scores ** 2)


def lsgan_g_loss(fake_scores):
    """Generator side: ½·mean[(fake-1)²]."""
    _check_finite("fake_scores", fake_scores)
    return 0.5 * torch.mean((fake_scores - 1.0) ** 2)


def _feature_l1(feat, a, b):
    return torch.mean(torch.abs(extract_features(feat, a) - extract_features(feat, b)))


def feature_loss(x, rec_x, y, rec_y, feat):
    """Deep-feature L1 between each input and its cycle reconstruction."""
    if feat.kind not in FEATURE_KINDS:
        raise BackendError(f"feature_loss needs a feature backend, got {feat.kind!r}")
    return _feature_l1(feat, x, rec_x) + _feature_l1(feat, y, rec_y)


def _edge_distance(edge, dist, a, b):
    return perceptual_distance(dist, edges_as_image(extract_edges(edge, a)), edges_as_image(extract_edges(edge, b)))


def semantic_loss(x, g_x, y, f_y, edge, dist):
    """Perceptual distance between edge maps of each input and its translation."""
    if edge.kind not in EDGE_KINDS:
        raise BackendError(f"semantic_loss needs an edge backend, got {edge.kind!r}")
    if dist.kind not in DISTANCE_KINDS:
        raise BackendError(f"semantic_loss needs a distance backend, got {dist.kind!r}")
    return _edge_distance(edge, dist, x, g_x) + _edge_distance(edge, dist, y, f_y)


def dual_loss(feature, semantic, mu):
    return feature + mu * semantic


def identity_loss(x, f_of_x, y, g_of_y):
    """mean|F(x) - x| + mean|G(y) - y|."""
    if x.shape != f_of_x.shape or y.shape != g_of_y.shape:
        raise ValueError("identity_loss: generator outputs must match their inputs' shapes")
    return torch.mean(torch.abs(f_of_x - x)) + torch.mean(torch.abs(g_of_y - y))


def total_objective(adv, dual, identity, w):
    """Generator objective.  ``adv`` is the sum of both generator-side adversarial terms.

    Discriminator losses are optimized separately and do not appear here.
    """
    return w.lambda_gan * adv + w.lambda_dual * dual + w.lambda_id * identity


def generator_terms(nets, x, y, backends, w, identity_mode="output_domain"):
    """Forward every generator path and evaluate the generator-side terms.

    Returns ``(total, terms, fakes)`` where ``terms`` maps term names to 0-d
    tensors and ``fakes`` holds ``G(x)`` and ``F(y)`` for the discriminator step.
    Disabled terms are exactly zero and their networks are not evaluated.
    """
    G, F = nets["G"], nets["F"]
    g_x, f_y = G(x), F(y)
    zero = x.new_zeros(())

    terms = {
        "g_adv": lsgan_g_loss(nets["D_Y"](g_x)),
        "f_adv": lsgan_g_loss(nets["D_X"](f_y)),
    }
    if w.use_feature:
        terms["feature"] = feature_loss(x, F(g_x), y, G(f_y), backends["feature"])
    else:
        terms["feature"] = zero
    if w.use_semantic:
        terms["semantic"] = semantic_loss(x, g_x, y, f_y, backends["edge"], backends["distance"])
    else:
        terms["semantic"] = zero
    terms["dual"] = dual_loss(terms["feature"], terms["semantic"], w.mu)
    if w.use_identity:
        if identity_mode == "output_domain":
            terms["identity"] = identity_loss(x, F(x), y, G(y))
        else:
            terms["identity"] = identity_loss(x, G(x), y, F(y))
    else:
        terms["identity"] = zero
    total = total_objective(terms["g_adv"] + terms["f_adv"], terms["dual"], terms["identity"], w)
    terms["total"] = total
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name, value.item())
    return total, terms, {"g_x": g_x, "f_y": f_y}
