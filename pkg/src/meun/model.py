"""The MEUN network: encoder, channel squeeze, ADM, edge branch, UEN decoder."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from meun.autodiff import ops
from meun.autodiff.tensor import Tensor
from meun.errors import ConfigError, DepthError, PoolDegeneracyError, ShapeError, WiringError
from meun.nn import Conv2, Conv2d, ConvBNReLU, Linear, Module

# Stage index -> U-block variant.
UEN_VARIANTS = {1: "UEN_5", 2: "UEN_4", 3: "UEN_4", 4: "UEN_A", 5: "UEN_A"}
UEN_A_DILATIONS = (1, 2, 4)
RESNET50_STAGE_CHANNELS = (64, 256, 512, 1024, 2048)
UNITED_HIDDEN = 16


@dataclass
class ModelConfig:
    input_size: int = 224
    base_channels: int = 128
    encoder: str = "mini"
    mini_stage_channels: tuple = (16, 32, 64, 64, 64)
    use_adm: bool = True
    use_uen: bool = True
    adm_fc_reduction: int = 4

    def __post_init__(self):
        self.mini_stage_channels = tuple(int(c) for c in self.mini_stage_channels)
        self.validate()

    def validate(self) -> None:
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be at least 8, got {self.base_channels}")
        if self.encoder not in ("mini", "resnet50-shape"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if len(self.mini_stage_channels) != 5 or min(self.mini_stage_channels) < 1:
            raise ConfigError("mini_stage_channels needs five positive counts")
        if self.adm_fc_reduction < 1 or self.base_channels // self.adm_fc_reduction < 1:
            raise ConfigError(f"invalid adm_fc_reduction {self.adm_fc_reduction}")

    @property
    def stage_channels(self) -> tuple:
        return self.mini_stage_channels if self.encoder == "mini" else RESNET50_STAGE_CHANNELS

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ModelOutputs:
    """Probability maps and their logits, all at input resolution.

    ``sal[0]`` is the top (highest-resolution) decoder prediction, ``sal[4]``
    the bottom one. ``shapes`` records intermediate tensor shapes by name.
    """

    edge_map: Tensor
    sal: list
    united: Tensor
    edge_logits: Tensor
    sal_logits: list
    united_logits: Tensor
    shapes: dict = field(default_factory=dict)

    def maps(self) -> dict:
        out = {"edge": self.edge_map, "united": self.united}
        out.update({f"sal_{i + 1}": s for i, s in enumerate(self.sal)})
        return out


# -- encoder -----------------------------------------------------------------


class Encoder(Module):
    """Five stages, each a conv unit followed by 2x pooling.

    The mini encoder uses 3x3 convolutions with configurable widths. The
    resnet50-shape encoder reproduces only the ResNet-50 stage widths
    (64, 256, 512, 1024, 2048) with 1x1 convolutions after a 3x3 stem.
    """

    def __init__(self, config: ModelConfig, *, rng, dtype):
        chans = config.stage_channels
        kernels = (3, 3, 3, 3, 3) if config.encoder == "mini" else (3, 1, 1, 1, 1)
        cin = 3
        self.stages = []
        for c, k in zip(chans, kernels):
            self.stages.append(ConvBNReLU(cin, c, k, rng=rng, dtype=dtype))
            cin = c

    def forward(self, image: Tensor) -> list:
        feats = []
        x = image
        for stage in self.stages:
            x = ops.maxpool2(stage(x), ceil_mode=True)
            feats.append(x)
        return feats


class ChannelSqueeze(Module):
    def __init__(self, in_channels, base, *, rng, dtype):
        self.units = [ConvBNReLU(c, base, 1, rng=rng, dtype=dtype) for c in in_channels]

    def forward(self, raw: list) -> list:
        return [unit(x) for unit, x in zip(self.units, raw)]


# -- ADM -----------------------------------------------------------------------


class ADM(Module):
    """Extra down-sampling of the deepest feature with channel attention.

    The pooled feature is re-weighted per channel and resized back to the
    input's resolution so it can be added to it.
    """

    def __init__(self, c, reduction, *, rng, dtype):
        self.conv_a = Conv2(c, c, rng=rng, dtype=dtype)
        self.conv_b = Conv2(c, c, rng=rng, dtype=dtype)
        self.fc1 = Linear(c, c // reduction, rng=rng, dtype=dtype)
        self.fc2 = Linear(c // reduction, c, rng=rng, dtype=dtype)

    def forward(self, b5: Tensor, return_vector: bool = False):
        h, w = b5.shape[2:]
        if h <= 1 and w <= 1:
            raise PoolDegeneracyError("ADM needs a deepest feature larger than 1x1; raise input_size")
        d = ops.maxpool2(self.conv_b(self.conv_a(b5)), ceil_mode=True)
        v = ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(d)))))
        out = ops.upsample_bilinear(ops.channel_scale(d, v), h, w)
        return (out, v) if return_vector else out


# -- U-blocks ------------------------------------------------------------------


class UEN(Module):
    """U-shaped block with ``depth`` poolings and a dilated bottleneck.

    depth 3 is UEN_5, depth 2 is UEN_4. Skips are fused by channel
    concatenation followed by a conv unit.
    """

    def __init__(self, c, depth, *, rng, dtype):
        self.depth = depth
        self.stem = ConvBNReLU(c, c, rng=rng, dtype=dtype)
        self.enc = [ConvBNReLU(c, c, rng=rng, dtype=dtype) for _ in range(depth + 1)]
        self.bottleneck = ConvBNReLU(c, c, dilation=2, rng=rng, dtype=dtype)
        self.dec = [ConvBNReLU(2 * c, c, rng=rng, dtype=dtype) for _ in range(depth + 1)]
        self.fuse = ConvBNReLU(2 * c, c, rng=rng, dtype=dtype)

    @property
    def variant(self) -> str:
        return f"UEN_{self.depth + 2}"

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if min(h, w) < 2**self.depth:
            raise DepthError(f"{self.variant} needs spatial size >= {2 ** self.depth}, got {h}x{w}")
        x0 = self.stem(x)
        skips = [self.enc[0](x0)]
        for conv in self.enc[1:]:
            skips.append(conv(ops.maxpool2(skips[-1], ceil_mode=True)))
        y = self.bottleneck(skips[-1])
        y = self.dec[0](ops.concat_channels([y, skips[-1]]))
        for conv, skip in zip(self.dec[1:], reversed(skips[:-1])):
            y = ops.upsample_bilinear(y, *skip.shape[2:])
            y = conv(ops.concat_channels([y, skip]))
        return self.fuse(ops.concat_channels([y, x0]))


class UENA(Module):
    """Pooling-free block: three parallel dilated 3x3 branches merged by a conv."""

    variant = "UEN_A"

    def __init__(self, c, *, rng, dtype):
        self.dilations = UEN_A_DILATIONS
        self.stem = ConvBNReLU(c, c, rng=rng, dtype=dtype)
        self.branch = [ConvBNReLU(c, c, dilation=r, rng=rng, dtype=dtype) for r in self.dilations]
        self.merge = ConvBNReLU(3 * c, c, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x0 = self.stem(x)
        return self.merge(ops.concat_channels([b(x0) for b in self.branch]))


class PlainBlock(Module):
    variant = "plain"

    def __init__(self, c, *, rng, dtype):
        self.c1 = ConvBNReLU(c, c, rng=rng, dtype=dtype)
        self.c2 = ConvBNReLU(c, c, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.c2(self.c1(x))


def make_uen(variant: str, c: int, *, rng, dtype) -> Module:
    if variant == "UEN_5":
        return UEN(c, 3, rng=rng, dtype=dtype)
    if variant == "UEN_4":
        return UEN(c, 2, rng=rng, dtype=dtype)
    if variant == "UEN_A":
        return UENA(c, rng=rng, dtype=dtype)
    raise ConfigError(f"unknown UEN variant {variant!r}")


# -- heads ----------------------------------------------------------------------


class EdgeBranch(Module):
    def __init__(self, c, *, rng, dtype):
        self.conv_a = Conv2(c, c, rng=rng, dtype=dtype)
        self.conv_b = Conv2(c, c, rng=rng, dtype=dtype)
        self.head = Conv2d(c, 1, 1, rng=rng, dtype=dtype)

    def forward(self, b1: Tensor, target_sizes: list, out_size: tuple):
        feat = self.conv_b(self.conv_a(b1))
        logits = ops.upsample_bilinear(self.head(feat), *out_size)
        per_stage = [ops.upsample_bilinear(feat, *hw) for hw in target_sizes]
        return per_stage, logits


class PredictionHead(Module):
    def __init__(self, c, *, rng, dtype):
        self.conv = ConvBNReLU(c, c, rng=rng, dtype=dtype)
        self.out = Conv2d(c, 1, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, out_size: tuple) -> Tensor:
        return ops.upsample_bilinear(self.out(self.conv(x)), *out_size)


class UnitedHead(Module):
    def __init__(self, *, rng, dtype):
        self.conv = Conv2d(5, UNITED_HIDDEN, 3, rng=rng, dtype=dtype)
        self.out = Conv2d(UNITED_HIDDEN, 1, 1, rng=rng, dtype=dtype)

    def forward(self, logits: list) -> Tensor:
        return self.out(ops.relu(self.conv(ops.concat_channels(logits))))


class Decoder(Module):
    def __init__(self, config: ModelConfig, *, rng, dtype):
        c = config.base_channels
        self.pre = [Conv2(c, c, rng=rng, dtype=dtype) for _ in range(5)]
        self.fuse = [Conv2(c, c, rng=rng, dtype=dtype) for _ in range(5)]
        for i in range(1, 6):
            block = (
                make_uen(UEN_VARIANTS[i], c, rng=rng, dtype=dtype)
                if config.use_uen
                else PlainBlock(c, rng=rng, dtype=dtype)
            )
            setattr(self, f"uen{i}", block)
        self.head = [PredictionHead(c, rng=rng, dtype=dtype) for _ in range(5)]
        self.united = UnitedHead(rng=rng, dtype=dtype)

    def uen(self, i: int) -> Module:
        return getattr(self, f"uen{i}")


def _add(a: Tensor, b: Tensor, stage: str) -> Tensor:
    try:
        return ops.add(a, b)
    except ShapeError as exc:
        raise WiringError(stage, str(exc)) from None


class MEUN(Module):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = self.config.base_channels
        self.encoder = Encoder(self.config, rng=rng, dtype=dtype)
        self.squeeze = ChannelSqueeze(self.config.stage_channels, c, rng=rng, dtype=dtype)
        if self.config.use_adm:
            self.adm = ADM(c, self.config.adm_fc_reduction, rng=rng, dtype=dtype)
        else:
            self.adm = Conv2(c, c, rng=rng, dtype=dtype)
        self.edge = EdgeBranch(c, rng=rng, dtype=dtype)
        self.decoder = Decoder(self.config, rng=rng, dtype=dtype)
        for name, p in self.named_parameters():
            p.name = name
            p.lr_group = "backbone" if name.startswith("encoder.") else "head"

    # each stage of the pipeline is exposed so it can be tested on its own

    def encoder_forward(self, image) -> list:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected an (n, 3, H, W) image batch, got {image.shape}")
        h, w = image.shape[2:]
        size = self.config.input_size
        if h % 32 or w % 32:
            raise ConfigError(f"image size {h}x{w} is not divisible by 32")
        if (h, w) != (size, size):
            raise ConfigError(f"image size {h}x{w} does not match input_size {size}")
        return self.encoder(image)

    def channel_squeeze(self, raw: list) -> list:
        return self.squeeze(raw)

    def adm_forward(self, b5: Tensor) -> Tensor:
        return self.adm(b5)

    def edge_branch(self, b1: Tensor, target_sizes: list, out_size: tuple):
        return self.edge(b1, target_sizes, out_size)

    def decoder_forward(self, pyramid: list, adm_out: Tensor, edge, out_size: tuple) -> ModelOutputs:
        dec = self.decoder
        edge_sal, edge_logits = edge
        shapes = {f"b{i + 1}": b.shape for i, b in enumerate(pyramid)}
        shapes["adm"] = adm_out.shape
        uen_out: dict[int, Tensor] = {}
        for i in range(5, 0, -1):
            b = pyramid[i - 1]
            stage = f"stage {i}"
            x = dec.pre[i - 1](b)
            if i == 5:
                x = _add(x, adm_out, stage)
            else:
                x = _add(x, edge_sal[i - 1], stage)
                up = ops.upsample_bilinear(uen_out[i + 1], *b.shape[2:])
                x = _add(x, up, stage)
            x = dec.fuse[i - 1](x)
            shapes[f"input{i}"] = x.shape
            y = dec.uen(i)(x)
            if y.shape != x.shape:
                raise WiringError(stage, f"U-block changed shape {x.shape} -> {y.shape}")
            shapes[f"uen{i}"] = y.shape
            uen_out[i] = y
        sal_logits = [dec.head[i - 1](uen_out[i], out_size) for i in range(1, 6)]
        united_logits = dec.united(sal_logits)
        return ModelOutputs(
            edge_map=ops.sigmoid(edge_logits),
            sal=[ops.sigmoid(s) for s in sal_logits],
            united=ops.sigmoid(united_logits),
            edge_logits=edge_logits,
            sal_logits=sal_logits,
            united_logits=united_logits,
            shapes=shapes,
        )

    def forward(self, image) -> ModelOutputs:
        raw = self.encoder_forward(image)
        pyramid = self.channel_squeeze(raw)
        adm_out = self.adm_forward(pyramid[4])
        out_size = (self.config.input_size, self.config.input_size)
        edge = self.edge_branch(pyramid[0], [p.shape[2:] for p in pyramid[:4]], out_size)
        outputs = self.decoder_forward(pyramid, adm_out, edge, out_size)
        outputs.shapes.update({f"raw{i + 1}": r.shape for i, r in enumerate(raw)})
        return outputs


def stage_sizes(input_size: int) -> list[int]:
    return [input_size // 2**i for i in range(1, 6)]
