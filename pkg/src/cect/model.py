"""The CECT classifier: multi-scale conv encoders, transposed-conv decoders
fused by ensemble coefficients, and a shifted-window transformer head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import BRANCHES, CectConfig, EnsembleCoefficients
from .errors import ConfigError, DimensionError, ValidationError
from .nn import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, parameter
from .rng import Rng
from .tensor import Tensor

REFERENCE_RESOLUTION = 224
# finite stand-in for -inf on masked attention logits
MASK_VALUE = -1e9

# branch -> (number of stride-2 encoder stages, spatial divisor)
BRANCH_STAGES = {"SD1": 3, "SD2": 2, "SD3": 1}


@dataclass
class FeatureMap:
    """A [N,C,H,W] tensor tagged with its scale at the 224 reference."""

    tensor: Tensor
    scale_tag: int

    def __post_init__(self):
        if self.tensor.ndim != 4 or self.tensor.shape[2] != self.tensor.shape[3]:
            raise DimensionError(f"feature map must be square [N,C,H,W], got {self.tensor.shape}")

    @classmethod
    def at(cls, tensor: Tensor, resolution: int) -> "FeatureMap":
        extent = tensor.shape[2]
        if (REFERENCE_RESOLUTION * extent) % resolution:
            raise DimensionError(f"extent {extent} has no reference scale at resolution {resolution}")
        return cls(tensor, REFERENCE_RESOLUTION * extent // resolution)

    def check(self, resolution: int) -> None:
        expected = self.scale_tag * resolution // REFERENCE_RESOLUTION
        if self.tensor.shape[2] != expected:
            raise DimensionError(
                f"map tagged S{self.scale_tag} should be {expected}x{expected} at resolution {resolution}, "
                f"got {self.tensor.shape[2]}"
            )

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]


# convolutional encoder --------------------------------------------------

class SubEncoder(Module):
    """``n_stages`` x (conv3x3 -> ReLU -> conv3x3 stride 2 -> ReLU)."""

    def __init__(self, c_in: int, width: int, n_stages: int, rng: Rng):
        self.stages = []
        for i in range(n_stages):
            r = rng.child("stage", i)
            self.stages.append(
                _Stage(Conv2d(c_in if i == 0 else width, width, 3, r.child("conv1"), padding=1),
                       Conv2d(width, width, 3, r.child("conv2"), stride=2, padding=1))
            )

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = F.relu(stage.conv2(F.relu(stage.conv1(x))))
        return x


class _Stage(Module):
    def __init__(self, conv1: Conv2d, conv2: Conv2d):
        self.conv1, self.conv2 = conv1, conv2


# transposed-convolutional decoders --------------------------------------

class SubDecoder(Module):
    """Decoder for one branch; every 4x4 transposed conv uses stride 2, padding 1.

    SD1: upsample x2 -> ReLU -> tconv -> ReLU -> tconv
    SD2: tconv -> ReLU -> tconv
    SD3: tconv
    """

    def __init__(self, branch: str, c_in: int, hidden: int, c_out: int, rng: Rng):
        self.branch = branch
        if branch == "SD3":
            self.layers = [ConvTranspose2d(c_in, c_out, 4, rng.child("tconv", 0), stride=2, padding=1)]
        else:
            self.layers = [
                ConvTranspose2d(c_in, hidden, 4, rng.child("tconv", 0), stride=2, padding=1),
                ConvTranspose2d(hidden, c_out, 4, rng.child("tconv", 1), stride=2, padding=1),
            ]

    def forward(self, x: Tensor) -> Tensor:
        if self.branch == "SD1":
            x = F.relu(F.upsample_nearest(x, 2))
        for i, layer in enumerate(self.layers):
            if i:
                x = F.relu(x)
            x = layer(x)
        return x


def _coefficients(coeffs) -> EnsembleCoefficients:
    if isinstance(coeffs, EnsembleCoefficients):
        return coeffs
    return EnsembleCoefficients.of(coeffs)


def fuse(outputs: dict[str, Tensor], coeffs: EnsembleCoefficients) -> Tensor:
    """Coefficient-weighted sum of the decoder outputs, in branch order."""
    fused = None
    for branch, c in zip(BRANCHES, coeffs.as_tuple()):
        if branch not in outputs:
            if c != 0:
                raise ValidationError(f"branch {branch} is disabled but has coefficient {c}")
            continue
        term = outputs[branch] * c
        fused = term if fused is None else fused + term
    if fused is None:
        raise ValidationError("no decoder branch to fuse")
    return fused


# windowed attention -----------------------------------------------------

def window_partition(x: Tensor, window: int) -> Tensor:
    """[N,H,W,D] -> [N*nW, window*window, D], windows in row-major order."""
    n, h, w, d = x.shape
    if h % window or w % window:
        raise DimensionError(f"token grid {h}x{w} not divisible by window {window}")
    x = x.reshape(n, h // window, window, w // window, window, d)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, window * window, d)


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of ``window_partition``."""
    d = windows.shape[-1]
    n = windows.shape[0] // ((h // window) * (w // window))
    x = windows.reshape(n, h // window, w // window, window, window, d)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, d)


def relative_position_index(window: int) -> np.ndarray:
    """[w*w, w*w] map from token pair to row of the (2w-1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def shift_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """[nW, T, T] additive mask: 0 inside a shifted region, MASK_VALUE across."""
    region = np.zeros((grid, grid), dtype=np.int64)
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for ws in bounds:
            region[hs, ws] = label
            label += 1
    r = region.reshape(grid // window, window, grid // window, window).transpose(0, 2, 1, 3)
    r = r.reshape(-1, window * window)
    return np.where(r[:, :, None] != r[:, None, :], MASK_VALUE, 0.0).astype(np.float32)


class WindowAttention(Module):
    """Multi-head self-attention inside (optionally shifted) windows, with
    a learned relative position bias per head."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, grid: int, rng: Rng):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide dim {dim}")
        self.dim, self.n_heads, self.window, self.shift, self.grid = dim, heads, window, shift, grid
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng.child("qkv"))
        self.proj = Linear(dim, dim, rng.child("proj"))
        self.bias_table = parameter(np.zeros(((2 * window - 1) ** 2, heads)))
        self._index = relative_position_index(window).reshape(-1)
        self._mask = Tensor(shift_mask(grid, window, shift)) if shift else None
        self.keep_attention = False
        self.last_attention: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, d = x.shape
        if h != self.grid or w != self.grid:
            raise DimensionError(f"attention built for a {self.grid}x{self.grid} grid, got {h}x{w}")
        if self.shift:
            x = x.roll((-self.shift, -self.shift), (1, 2))
        windows = window_partition(x, self.window)
        b, t, _ = windows.shape
        dh = d // self.n_heads
        qkv = self.qkv(windows).reshape(b, t, 3, self.n_heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(0, 1, 3, 2)
        bias = self.bias_table.take(self._index, axis=0).reshape(t, t, self.n_heads).transpose(2, 0, 1)
        logits = logits + bias
        if self._mask is not None:
            n_win = self._mask.shape[0]
            logits = logits.reshape(b // n_win, n_win, self.n_heads, t, t) + self._mask.reshape(1, n_win, 1, t, t)
            logits = logits.reshape(b, self.n_heads, t, t)
        attn = F.softmax(logits, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data.copy()
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        out = window_reverse(self.proj(out), self.window, h, w)
        if self.shift:
            out = out.roll((self.shift, self.shift), (1, 2))
        return out


class CswtBlock(Module):
    """Pre-norm attention sublayer then pre-norm GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, grid: int, mlp_ratio: float, eps: float, rng: Rng):
        hidden = max(1, int(round(dim * mlp_ratio)))
        self.norm1 = LayerNorm(dim, eps)
        self.attn = WindowAttention(dim, heads, window, shift, grid, rng.child("attn"))
        self.norm2 = LayerNorm(dim, eps)
        self.fc1 = Linear(dim, hidden, rng.child("fc1"))
        self.fc2 = Linear(hidden, dim, rng.child("fc2"))

    def attention(self, z: Tensor) -> Tensor:
        return self.attn(self.norm1(z)) + z

    def mlp(self, z_hat: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(self.norm2(z_hat)))) + z_hat

    def forward(self, z: Tensor) -> Tensor:
        return self.mlp(self.attention(z))


class BlockPair(Module):
    """Regular-window block followed by shifted-window block."""

    def __init__(self, dim: int, heads: int, window: int, grid: int, mlp_ratio: float, eps: float, rng: Rng):
        shift = window // 2 if grid > window else 0
        self.regular = CswtBlock(dim, heads, window, 0, grid, mlp_ratio, eps, rng.child("w"))
        self.shifted = CswtBlock(dim, heads, window, shift, grid, mlp_ratio, eps, rng.child("sw"))

    def forward(self, z: Tensor) -> Tensor:
        return self.shifted(self.regular(z))


class PatchEmbed(Module):
    def __init__(self, c_in: int, dim: int, patch: int, eps: float, rng: Rng):
        self.proj = Conv2d(c_in, dim, patch, rng, stride=patch)
        self.norm = LayerNorm(dim, eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(x).transpose(0, 2, 3, 1))


class PatchMerging(Module):
    """2x2 neighbour concatenation, LN, then linear to twice the width."""

    def __init__(self, dim: int, eps: float, rng: Rng):
        self.norm = LayerNorm(4 * dim, eps)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, d = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"patch merging needs an even grid, got {h}x{w}")
        x = x.reshape(n, h // 2, 2, w // 2, 2, d).transpose(0, 1, 3, 4, 2, 5).reshape(n, h // 2, w // 2, 4 * d)
        return self.reduction(self.norm(x))


class TransformerClassifier(Module):
    """Patch embedding, four stages of block pairs with merging in between,
    final LN, token average, and a two-way linear head."""

    def __init__(self, cfg: CectConfig, c_in: int, rng: Rng):
        t = cfg.tcb
        self.resolution = cfg.input_resolution
        grids = t.stage_grids(cfg.input_resolution)
        windows = t.stage_windows(cfg.input_resolution)
        self.patch_embed = PatchEmbed(c_in, t.stage_dims[0], t.patch_size, cfg.ln_eps, rng.child("patch_embed"))
        self.stages = []
        self.merges = []
        for s in range(4):
            r = rng.child("stage", s)
            self.stages.append([
                BlockPair(t.stage_dims[s], t.heads[s], windows[s], grids[s], t.mlp_ratio, cfg.ln_eps, r.child("pair", i))
                for i in range(t.stage_depths[s])
            ])
            if s < 3:
                self.merges.append(PatchMerging(t.stage_dims[s], cfg.ln_eps, r.child("merge")))
        self.norm = LayerNorm(t.stage_dims[3], cfg.ln_eps)
        self.head = Linear(t.stage_dims[3], 2, rng.child("head"))

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def tokens(self, x: Tensor) -> list[Tensor]:
        """Token maps [N,G,G,D] at the output of each stage."""
        if x.shape[2] != self.resolution or x.shape[3] != self.resolution:
            raise DimensionError(f"transformer expects {self.resolution}x{self.resolution} input, got {x.shape}")
        z = self.patch_embed(x)
        out = []
        for s, stage in enumerate(self.stages):
            for pair in stage:
                z = pair(z)
            out.append(z)
            if s < 3:
                z = self.merges[s](z)
        return out

    def features(self, x: Tensor) -> Tensor:
        z = self.norm(self.tokens(x)[-1])
        return z.mean(axis=(1, 2))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


# full model ---------------------------------------------------------------

class CECT(Module):
    """Encoders -> decoders -> coefficient fusion -> windowed transformer."""

    def __init__(self, cfg: CectConfig, seed: int = 0):
        self.cfg = cfg
        self._coeffs = cfg.active_coefficients()
        rng = Rng(seed)
        self.encoders = {}
        self.decoders = {}
        for branch, width in zip(BRANCHES, cfg.encoder_channels):
            if branch not in cfg.enabled_branches:
                continue
            self.encoders[branch] = SubEncoder(cfg.input_channels, width, BRANCH_STAGES[branch], rng.child("ceb", branch))
            self.decoders[branch] = SubDecoder(branch, width, cfg.decoder_hidden, cfg.decoder_channels, rng.child("tdb", branch))
        self.tcb_net = TransformerClassifier(cfg, cfg.decoder_channels, rng.child("tcb"))

    @property
    def coefficients(self) -> EnsembleCoefficients:
        return self._coeffs

    def _check_image(self, image: Tensor) -> None:
        r = self.cfg.input_resolution
        if image.ndim != 4 or image.shape[1:] != (self.cfg.input_channels, r, r):
            raise DimensionError(
                f"expected images [N,{self.cfg.input_channels},{r},{r}], got {image.shape}"
            )

    def ceb(self, image: Tensor) -> tuple[FeatureMap | None, FeatureMap | None, FeatureMap | None]:
        """Multi-scale local features at R/8, R/4, R/2 (None for disabled branches)."""
        self._check_image(image)
        out = []
        for branch in BRANCHES:
            enc = self.encoders.get(branch)
            out.append(None if enc is None else FeatureMap.at(enc(image), self.cfg.input_resolution))
        return tuple(out)

    def decode(self, f28: FeatureMap | None, f56: FeatureMap | None, f112: FeatureMap | None) -> dict[str, Tensor]:
        """Each enabled branch decoded to [N, decoder_channels, R, R]."""
        outputs = {}
        batch = None
        for branch, fmap, tag in zip(BRANCHES, (f28, f56, f112), (28, 56, 112)):
            if branch not in self.decoders:
                continue
            if fmap is None:
                raise ValidationError(f"branch {branch} is enabled but received no feature map")
            if fmap.scale_tag != tag:
                raise DimensionError(f"branch {branch} expects an S{tag} map, got S{fmap.scale_tag}")
            fmap.check(self.cfg.input_resolution)
            if batch is not None and fmap.tensor.shape[0] != batch:
                raise DimensionError("feature maps carry different batch sizes")
            batch = fmap.tensor.shape[0]
            outputs[branch] = self.decoders[branch](fmap.tensor)
        return outputs

    def tdb(self, f28, f56, f112, coeffs=None) -> FeatureMap:
        coeffs = self._coeffs if coeffs is None else _coefficients(coeffs)
        fused = fuse(self.decode(f28, f56, f112), coeffs)
        return FeatureMap(fused, REFERENCE_RESOLUTION)

    def tcb(self, fused: FeatureMap) -> Tensor:
        fused.check(self.cfg.input_resolution)
        return self.tcb_net(fused.tensor)

    def extract_penultimate(self, image: Tensor, coeffs=None) -> Tensor:
        fused = self.tdb(*self.ceb(image), coeffs=coeffs)
        return self.tcb_net.features(fused.tensor)

    def head(self, features: Tensor) -> Tensor:
        return self.tcb_net.head(features)

    def forward(self, image: Tensor, coeffs=None) -> Tensor:
        return self.head(self.extract_penultimate(image, coeffs))


class EncoderClassifier(Module):
    """One sub-encoder with global average pooling and a two-way linear head."""

    def __init__(self, cfg: CectConfig, branch: str, seed: int = 0):
        self.cfg = cfg
        self.branch = branch
        rng = Rng(seed)
        width = cfg.encoder_channels[BRANCHES.index(branch)]
        self.encoder = SubEncoder(cfg.input_channels, width, BRANCH_STAGES[branch], rng.child("ceb", branch))
        self.head_layer = Linear(width, 2, rng.child("ceb_head", branch))

    def extract_penultimate(self, image: Tensor) -> Tensor:
        return F.global_avg_pool(self.encoder(image))

    def forward(self, image: Tensor) -> Tensor:
        return self.head_layer(self.extract_penultimate(image))


class TransformerOnly(Module):
    """The transformer classifier applied directly to the image."""

    def __init__(self, cfg: CectConfig, seed: int = 0):
        self.cfg = cfg
        self.tcb_net = TransformerClassifier(cfg, cfg.input_channels, Rng(seed).child("tcb"))

    def extract_penultimate(self, image: Tensor) -> Tensor:
        return self.tcb_net.features(image)

    def forward(self, image: Tensor) -> Tensor:
        return self.tcb_net(image)

