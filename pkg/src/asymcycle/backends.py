"""Frozen perceptual services used by the losses and metrics.

Three roles: deep features at VGG-16 ``relu3_3`` (feature consistency),
edge maps (semantic consistency) and a learned perceptual distance on those
edge maps.  Every role has a real network, loaded from a weight directory, and
a seeded stub that needs no files so the whole pipeline runs offline.

Weight directory layout::

    manifest.json   {"kind": ..., "entries": [{"name", "shape", "dtype", "file"}, ...]}
    <file>          raw little-endian float32 array, one per entry

Backends never train: their parameters have ``requires_grad=False`` and they
stay in eval mode, but gradients still flow through them to their inputs.
"""

import json
import os

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

FEATURE_KINDS = ("feature_vgg16_relu3_3", "stub_feature")
EDGE_KINDS = ("edge_dexined", "stub_edge")
DISTANCE_KINDS = ("lpips_distance", "stub_distance")
POOLED_KINDS = FEATURE_KINDS + ("inception_v3",)
ALL_KINDS = FEATURE_KINDS + EDGE_KINDS + DISTANCE_KINDS + ("inception_v3",)
STUB_KINDS = ("stub_feature", "stub_edge", "stub_distance")

_STUB_SEEDS = {"stub_feature": 1001, "stub_edge": 1002, "stub_distance": 1003}

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class BackendError(ValueError):
    pass


class Backend(nn.Module):
    kind = None
    weights_path = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode=True):
        # Batch-norm statistics must never update.
        return super().train(False)

    @property
    def backend_id(self):
        return self.kind if self.weights_path is None else f"{self.kind}:{os.path.abspath(self.weights_path)}"


def _seeded_conv(rng, c_in, c_out, kernel, stride=1, padding=0, padding_mode="zeros"):
    conv = nn.Conv2d(c_in, c_out, kernel, stride, padding, padding_mode=padding_mode)
    fan_in = c_in * kernel * kernel
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=conv.weight.shape)
    b = rng.normal(0.0, 0.05, size=conv.bias.shape)
    with torch.no_grad():
        conv.weight.copy_(torch.from_numpy(w))
        conv.bias.copy_(torch.from_numpy(b))
    return conv


def _imagenet_normalize(x):
    mean = x.new_tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(_IMAGENET_STD).view(1, 3, 1, 1)
    return ((x + 1.0) / 2.0 - mean) / std


# --- deep features -------------------------------------------------------


class StubFeature(Backend):
    """Seeded conv stack with the same /4 stride and post-ReLU output as relu3_3."""

    kind = "stub_feature"
    source_layer = "stub_relu3"

    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(_STUB_SEEDS[self.kind])
        self.body = nn.Sequential(
            _seeded_conv(rng, 3, 16, 3, 1, 1), nn.ReLU(),
            _seeded_conv(rng, 16, 32, 3, 2, 1), nn.ReLU(),
            _seeded_conv(rng, 32, 64, 3, 2, 1), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


class VGGRelu33(Backend):
    kind = "feature_vgg16_relu3_3"
    source_layer = "relu3_3"

    def __init__(self):
        super().__init__()
        from torchvision.models import vgg16

        self.features = vgg16(weights=None).features[:16]

    def forward(self, x):
        return self.features(_imagenet_normalize(x))


# --- edges ---------------------------------------------------------------


class StubEdge(Backend):
    """Seeded conv stack with replicate padding and a sigmoid head.

    Replicate padding keeps constant images mapped to constant edge maps.
    """

    kind = "stub_edge"

    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(_STUB_SEEDS[self.kind])
        self.body = nn.Sequential(
            _seeded_conv(rng, 3, 8, 3, 1, 1, "replicate"), nn.ReLU(),
            _seeded_conv(rng, 8, 8, 3, 1, 1, "replicate"), nn.ReLU(),
            _seeded_conv(rng, 8, 1, 3, 1, 1, "replicate"),
        )

    def forward(self, x):
        return torch.sigmoid(self.body(x))


class _DenseLayer(nn.Sequential):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.add_module("relu1", nn.ReLU())
        self.add_module("conv1", nn.Conv2d(c_in, c_out, 3, padding=2))
        self.add_module("norm1", nn.BatchNorm2d(c_out))
        self.add_module("relu2", nn.ReLU())
        self.add_module("conv2", nn.Conv2d(c_out, c_out, 3))
        self.add_module("norm2", nn.BatchNorm2d(c_out))

    def forward(self, pair):
        x1, x2 = pair
        new = super().forward(F.relu(x1))
        return 0.5 * (new + x2), x2


class _DenseBlock(nn.Sequential):
    def __init__(self, n_layers, c_in, c_out):
        super().__init__()
        for i in range(n_layers):
            self.add_module(f"denselayer{i + 1}", _DenseLayer(c_in, c_out))
            c_in = c_out


class _UpConvBlock(nn.Module):
    def __init__(self, c_in, up_scale):
        super().__init__()
        pads = [0, 0, 1, 3, 7]
        layers = []
        for i in range(up_scale):
            c_out = 1 if i == up_scale - 1 else 16
            layers += [nn.Conv2d(c_in, c_out, 1), nn.ReLU(),
                       nn.ConvTranspose2d(c_out, c_out, 2 ** up_scale, stride=2, padding=pads[up_scale])]
            c_in = c_out
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)


class _SingleConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, use_bs=True):
        super().__init__()
        self.use_bs = use_bs
        self.conv = nn.Conv2d(c_in, c_out, 1, stride=stride)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        x = self.conv(x)
        return self.bn(x) if self.use_bs else x


class _DoubleConvBlock(nn.Module):
    def __init__(self, c_in, c_mid, c_out=None, stride=1, use_act=True):
        super().__init__()
        self.use_act = use_act
        c_out = c_mid if c_out is None else c_out
        self.conv1 = nn.Conv2d(c_in, c_mid, 3, padding=1, stride=stride)
        self.bn1 = nn.BatchNorm2d(c_mid)
        self.conv2 = nn.Conv2d(c_mid, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu = nn.ReLU()

    def forward(self, x):
        x = self.relu(self.bn1(self.conv1(x)))
        x = self.bn2(self.conv2(x))
        return self.relu(x) if self.use_act else x


class DexiNedEdge(Backend):
    """DexiNed edge detector; the fused side-output map passed through a sigmoid.

    Module names follow the public DexiNed checkpoint layout so its state dict
    can be exported to a weight directory unchanged.
    """

    kind = "edge_dexined"
    _MEAN_BGR = (103.939, 116.779, 123.68)

    def __init__(self):
        super().__init__()
        self.block_1 = _DoubleConvBlock(3, 32, 64, stride=2)
        self.block_2 = _DoubleConvBlock(64, 128, use_act=False)
        self.dblock_3 = _DenseBlock(2, 128, 256)
        self.dblock_4 = _DenseBlock(3, 256, 512)
        self.dblock_5 = _DenseBlock(3, 512, 512)
        self.dblock_6 = _DenseBlock(3, 512, 256)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.side_1 = _SingleConvBlock(64, 128, 2)
        self.side_2 = _SingleConvBlock(128, 256, 2)
        self.side_3 = _SingleConvBlock(256, 512, 2)
        self.side_4 = _SingleConvBlock(512, 512, 1)
        self.side_5 = _SingleConvBlock(512, 256, 1)
        self.pre_dense_2 = _SingleConvBlock(128, 256, 2)
        self.pre_dense_3 = _SingleConvBlock(128, 256, 1)
        self.pre_dense_4 = _SingleConvBlock(256, 512, 1)
        self.pre_dense_5 = _SingleConvBlock(512, 512, 1)
        self.pre_dense_6 = _SingleConvBlock(512, 256, 1)
        self.up_block_1 = _UpConvBlock(64, 1)
        self.up_block_2 = _UpConvBlock(128, 1)
        self.up_block_3 = _UpConvBlock(256, 2)
        self.up_block_4 = _UpConvBlock(512, 3)
        self.up_block_5 = _UpConvBlock(512, 4)
        self.up_block_6 = _UpConvBlock(256, 4)
        self.block_cat = _SingleConvBlock(6, 1, stride=1, use_bs=False)

    @staticmethod
    def _match(t, size):
        return t if t.shape[-2:] == size else F.interpolate(t, size=size, mode="bilinear", align_corners=False)

    def side_outputs(self, x):
        size = x.shape[-2:]
        # [-1, 1] RGB -> mean-subtracted 0..255 BGR, the detector's training convention.
        x = (x + 1.0) * 127.5
        x = x.flip(1) - x.new_tensor(self._MEAN_BGR).view(1, 3, 1, 1)

        block_1 = self.block_1(x)
        block_1_side = self.side_1(block_1)
        block_2 = self.block_2(block_1)
        block_2_down = self.maxpool(block_2)
        block_2_add = block_2_down + block_1_side
        block_2_side = self.side_2(block_2_add)

        block_3_pre = self.pre_dense_3(block_2_down)
        block_3, _ = self.dblock_3([block_2_add, block_3_pre])
        block_3_down = self.maxpool(block_3)
        block_3_add = block_3_down + block_2_side
        block_3_side = self.side_3(block_3_add)

        block_2_half = self.pre_dense_2(block_2_down)
        block_4_pre = self.pre_dense_4(block_3_down + block_2_half)
        block_4, _ = self.dblock_4([block_3_add, block_4_pre])
        block_4_down = self.maxpool(block_4)
        block_4_add = block_4_down + block_3_side
        block_4_side = self.side_4(block_4_add)

        block_5_pre = self.pre_dense_5(block_4_down)
        block_5, _ = self.dblock_5([block_4_add, block_5_pre])
        block_5_add = block_5 + block_4_side

        block_6_pre = self.pre_dense_6(block_5)
        block_6, _ = self.dblock_6([block_5_add, block_6_pre])

        ups = [self.up_block_1(block_1), self.up_block_2(block_2), self.up_block_3(block_3),
               self.up_block_4(block_4), self.up_block_5(block_5), self.up_block_6(block_6)]
        ups = [self._match(u, size) for u in ups]
        return ups + [self.block_cat(torch.cat(ups, dim=1))]

    def forward(self, x):
        return torch.sigmoid(self.side_outputs(x)[-1])


# --- perceptual distance -------------------------------------------------


def _unit_normalize(t, eps=1e-10):
    return t / (torch.sqrt(torch.sum(t * t, dim=1, keepdim=True)) + eps)


class _LPIPSBase(Backend):
    """Shared reduction: unit-normalize, squared difference, 1x1 weighting, spatial mean, layer sum."""

    def layer_features(self, x):
        raise NotImplementedError

    def channel_weights(self, idx, diff):
        return diff.sum(dim=1, keepdim=True)

    def forward(self, a, c):
        total = 0.0
        for idx, (fa, fc) in enumerate(zip(self.layer_features(a), self.layer_features(c))):
            diff = (_unit_normalize(fa) - _unit_normalize(fc)) ** 2
            total = total + self.channel_weights(idx, diff).mean(dim=(2, 3))
        return total.view(-1)


class StubDistance(_LPIPSBase):
    kind = "stub_distance"

    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(_STUB_SEEDS[self.kind])
        self.slice1 = nn.Sequential(_seeded_conv(rng, 3, 16, 3, 1, 1), nn.ReLU())
        self.slice2 = nn.Sequential(_seeded_conv(rng, 16, 32, 3, 2, 1), nn.ReLU())

    def layer_features(self, x):
        h1 = self.slice1(x)
        return [h1, self.slice2(h1)]


class _VGGSlices(nn.Module):
    _BOUNDS = ((0, 4), (4, 9), (9, 16), (16, 23), (23, 30))

    def __init__(self):
        super().__init__()
        from torchvision.models import vgg16

        features = vgg16(weights=None).features
        for n, (lo, hi) in enumerate(self._BOUNDS, start=1):
            block = nn.Sequential()
            for i in range(lo, hi):
                block.add_module(str(i), features[i])
            setattr(self, f"slice{n}", block)

    def forward(self, x):
        outs = []
        for n in range(1, 6):
            x = getattr(self, f"slice{n}")(x)
            outs.append(x)
        return outs


class _NetLin(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.model = nn.Sequential(nn.Dropout(), nn.Conv2d(channels, 1, 1, bias=False))


class LPIPSDistance(_LPIPSBase):
    """LPIPS with a VGG-16 trunk and learned per-channel weights."""

    kind = "lpips_distance"
    _SHIFT = (-0.030, -0.088, -0.188)
    _SCALE = (0.458, 0.448, 0.450)

    def __init__(self):
        super().__init__()
        self.net = _VGGSlices()
        for i, ch in enumerate((64, 128, 256, 512, 512)):
            setattr(self, f"lin{i}", _NetLin(ch))

    def layer_features(self, x):
        shift = x.new_tensor(self._SHIFT).view(1, 3, 1, 1)
        scale = x.new_tensor(self._SCALE).view(1, 3, 1, 1)
        return self.net((x - shift) / scale)

    def channel_weights(self, idx, diff):
        return getattr(self, f"lin{idx}").model(diff)


# --- pooled features for distribution metrics -----------------------------


class InceptionPool(Backend):
    """Inception-v3 2048-d pool features (torchvision layout)."""

    kind = "inception_v3"

    def __init__(self):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        net.fc = nn.Identity()
        self.net = net

    def forward(self, x):
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(_imagenet_normalize(x))


_REGISTRY = {
    "stub_feature": StubFeature,
    "feature_vgg16_relu3_3": VGGRelu33,
    "stub_edge": StubEdge,
    "edge_dexined": DexiNedEdge,
    "stub_distance": StubDistance,
    "lpips_distance": LPIPSDistance,
    "inception_v3": InceptionPool,
}


# --- weight directories --------------------------------------------------


def _weight_entries(module):
    return {k: v for k, v in module.state_dict().items() if not k.endswith("num_batches_tracked")}


def write_weights(module, path, kind=None):
    """Export a module's floating-point state to a weight directory."""
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, tensor in _weight_entries(module).items():
        fname = name.replace("/", "_") + ".bin"
        array = tensor.detach().cpu().numpy().astype("<f4")
        array.tofile(os.path.join(path, fname))
        entries.append({"name": name, "shape": list(array.shape), "dtype": "float32", "file": fname})
    manifest = {"kind": kind or getattr(module, "kind", None), "entries": entries}
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def read_weights(module, path):
    """Load a weight directory into ``module`` after checking names and shapes."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise BackendError(f"weight directory {path!r} has no manifest.json")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    expected = _weight_entries(module)
    listed = {e["name"]: e for e in manifest.get("entries", [])}
    for name, tensor in expected.items():
        entry = listed.get(name)
        if entry is None:
            raise BackendError(f"weights missing entry {name!r} (expected shape {list(tensor.shape)})")
        if list(entry["shape"]) != list(tensor.shape):
            raise BackendError(
                f"shape mismatch for {name!r}: file has {list(entry['shape'])}, expected {list(tensor.shape)}")
        if entry.get("dtype", "float32") != "float32":
            raise BackendError(f"entry {name!r} has dtype {entry['dtype']!r}, expected float32")
    extra = sorted(set(listed) - set(expected))
    if extra:
        raise BackendError(f"weights contain unexpected entry {extra[0]!r}")
    state = {}
    for name, tensor in expected.items():
        entry = listed[name]
        raw = np.fromfile(os.path.join(path, entry["file"]), dtype="<f4")
        if raw.size != tensor.numel():
            raise BackendError(f"data file for {name!r} holds {raw.size} values, expected {tensor.numel()}")
        state[name] = torch.from_numpy(raw.reshape(tensor.shape).astype(np.float32))
    module.load_state_dict(state, strict=False)
    return module


def load_backend(kind, weights_path=None):
    """Build a frozen backend.  Stub kinds take no weights; real kinds require them."""
    if kind not in _REGISTRY:
        raise BackendError(f"unknown backend kind {kind!r}; choose from {sorted(_REGISTRY)}")
    module = _REGISTRY[kind]()
    if kind in STUB_KINDS:
        if weights_path:
            raise BackendError(f"{kind} is seeded internally and takes no weights path")
    else:
        if not weights_path:
            raise BackendError(f"{kind} needs a weights directory")
        if not os.path.isdir(weights_path):
            raise BackendError(f"weights directory does not exist: {weights_path}")
        read_weights(module, weights_path)
        module.weights_path = weights_path
    return module.freeze()


def export_pretrained(kind, path):
    """Write torchvision's ImageNet weights for a real feature kind (needs network access)."""
    from torchvision.models import Inception_V3_Weights, VGG16_Weights, inception_v3, vgg16

    module = _REGISTRY[kind]()
    if kind == "feature_vgg16_relu3_3":
        module.features.load_state_dict(vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features[:16].state_dict())
    elif kind == "inception_v3":
        src = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        src.fc = nn.Identity()
        src.AuxLogits = None
        module.net.load_state_dict(src.state_dict(), strict=False)
    else:
        raise BackendError(f"no torchvision source for {kind!r}; convert its published checkpoint with write_weights")
    return write_weights(module, path, kind)


# --- operations ----------------------------------------------------------


def _batched(img):
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() != 4:
        raise BackendError(f"expected CxHxW or NxCxHxW, got shape {tuple(img.shape)}")
    return img, False


def _require(b, kinds, op):
    if b.kind not in kinds:
        raise BackendError(f"{op} needs a backend of kind {kinds}, got {b.kind!r}")


def extract_features(b, img):
    """Deep feature map (post-ReLU, spatial stride 4)."""
    _require(b, FEATURE_KINDS, "extract_features")
    x, single = _batched(img)
    out = b(x)
    return out[0] if single else out


def extract_edges(b, img):
    """Single-channel edge probability map at input resolution."""
    _require(b, EDGE_KINDS, "extract_edges")
    x, single = _batched(img)
    out = b(x)
    return out[0] if single else out


def edges_as_image(edges):
    """[0, 1] edge maps -> 3-channel [-1, 1] images for the distance backend."""
    return (edges * 2.0 - 1.0).expand(*edges.shape[:-3], 3, *edges.shape[-2:])


def perceptual_distance(b, a, c):
    """Mean perceptual distance over the batch; 1-channel inputs are replicated to 3."""
    _require(b, DISTANCE_KINDS, "perceptual_distance")
    if a.shape != c.shape:
        raise BackendError(f"shape mismatch: {tuple(a.shape)} vs {tuple(c.shape)}")
    a, _ = _batched(a)
    c, _ = _batched(c)
    if a.shape[1] == 1:
        a = a.expand(-1, 3, -1, -1)
        c = c.expand(-1, 3, -1, -1)
    return b(a, c).mean()


def pooled_features(b, img):
    """One D-vector per image: global-average-pooled features (or Inception pool3)."""
    _require(b, POOLED_KINDS, "pooled_features")
    x, _ = _batched(img)
    out = b(x)
    if out.dim() == 4:
        out = out.mean(dim=(2, 3))
    return out
