"""Builders for the baseline CNN, the bottleneck residual network and the
inception network, plus transfer-head assembly.

Every builder takes an :class:`ArchitectureConfig`. The ``mini`` preset
shrinks the input and widths for desk-scale runs but emits exactly the same
node-kind sequence and wiring as ``full``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigError, GraphError, ShapeError
from .layers import (BatchNorm, ChannelConcat, Conv2D, Dense, Dropout, Flatten, GlobalAvgPool,
                     LayerGraph, MaxPool2D, ReLU, ResidualAdd, Softmax)

ARCHES = ("baseline", "resnet", "inception")
PRESETS = ("full", "mini")
BACKBONE = "backbone"
HEAD = "head"

BASELINE_WIDTHS = {"full": (32, 64, 128), "mini": (16, 32, 32)}
RESNET_WIDTHS = {
    "full": dict(stem=64, stages=(64, 128, 256, 512)),
    "mini": dict(stem=4, stages=(2, 2, 4, 4)),
}
RESNET_BLOCKS = (3, 4, 6, 3)
RESNET_EXPANSION = 4
# per module: 1x1, (3x3 reduce, 3x3), (5x5 reduce, 5x5), pool projection
INCEPTION_WIDTHS = {
    "full": dict(stem=(32, 32, 64, 80, 192), modules=(
        (64, (96, 128), (16, 32), 32),
        (128, (128, 192), (32, 96), 64),
        (192, (96, 208), (16, 48), 64),
    )),
    "mini": dict(stem=(4, 4, 8, 8, 12), modules=(
        (4, (4, 6), (2, 3), 3),
        (6, (4, 6), (2, 3), 3),
        (6, (4, 8), (2, 4), 4),
    )),
}
DEFAULT_INPUT = {"full": (224, 224, 3), "mini": (32, 32, 3)}
# short desk-scale runs take only a few hundred steps; 0.99 would leave the
# running statistics close to their initial values
DEFAULT_BN_MOMENTUM = {"full": 0.99, "mini": 0.9}


@dataclass
class ArchitectureConfig:
    preset: str = "full"
    input_shape: tuple | None = None
    num_classes: int = 5
    seed: int = 0
    # GAP before the transfer heads; False flattens the raw feature map
    pooled_features: bool = True
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5
    head_dropout: float = 0.5
    # two stacked 3x3 convs stand in for the 5x5 inception branch
    factor_5x5: bool = True
    bn_momentum: float | None = None
    bn_epsilon: float = 1e-3
    # start every bottleneck as the identity by zeroing the gamma of its last BN
    zero_init_residual: bool | None = None
    widths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.input_shape is None:
            self.input_shape = DEFAULT_INPUT[self.preset]
        if self.bn_momentum is None:
            self.bn_momentum = DEFAULT_BN_MOMENTUM[self.preset]
        if self.zero_init_residual is None:
            self.zero_init_residual = self.preset == "mini"
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input shape must be H x W x C, got {self.input_shape}")

    def to_dict(self):
        return asdict(self)


def _conv_bn_relu(g, prefix, cfg, filters, kernel, stride=1, inputs=None, relu=True):
    g.add(f"{prefix}.conv", Conv2D(filters, kernel, stride, "same", use_bias=False), inputs)
    g.add(f"{prefix}.bn", BatchNorm(cfg.bn_momentum, cfg.bn_epsilon))
    if relu:
        g.add(f"{prefix}.relu", ReLU())
    return g.output_id


def build_baseline(cfg: ArchitectureConfig) -> LayerGraph:
    """Two conv/pool/dropout stages, one hidden dense layer, softmax output."""
    h, w, _ = cfg.input_shape
    if h < 4 or w < 4:
        raise ShapeError(f"input {h}x{w} too small for two 2x2 pooling stages")
    c1, c2, units = cfg.widths.get("baseline", BASELINE_WIDTHS[cfg.preset])
    g = LayerGraph(cfg.input_shape, cfg.seed)
    for i, filters in enumerate((c1, c2), start=1):
        g.add(f"conv{i}", Conv2D(filters, 3, 1, "same"))
        g.add(f"relu{i}", ReLU())
        g.add(f"pool{i}", MaxPool2D(2, 2))
        g.add(f"drop{i}", Dropout(cfg.conv_dropout))
    g.add("flatten", Flatten())
    g.add("dense1", Dense(units))
    g.add("relu3", ReLU())
    g.add("drop3", Dropout(cfg.dense_dropout))
    g.add("dense2", Dense(cfg.num_classes))
    g.add("softmax", Softmax())
    g.validate()
    return g


def _bottleneck(g, prefix, cfg, width, stride, project):
    x = g.output_id
    _conv_bn_relu(g, f"{prefix}.a", cfg, width, 1, stride, inputs=x)
    _conv_bn_relu(g, f"{prefix}.b", cfg, width, 3)
    residual = _conv_bn_relu(g, f"{prefix}.c", cfg, width * RESNET_EXPANSION, 1, relu=False)
    if cfg.zero_init_residual:
        g[residual].layer.params["gamma"][...] = 0.0
    shortcut = x
    if project:
        shortcut = _conv_bn_relu(g, f"{prefix}.proj", cfg, width * RESNET_EXPANSION, 1, stride,
                                 inputs=x, relu=False)
    g.add(f"{prefix}.add", ResidualAdd(), (shortcut, residual))
    g.add(f"{prefix}.out", ReLU())
    return g.output_id


def build_residual_backbone(cfg: ArchitectureConfig) -> LayerGraph:
    """7x7/2 stem, 3x3/2 max pool, four bottleneck stages of (3, 4, 6, 3) blocks."""
    h, w, _ = cfg.input_shape
    if h < 2 or w < 2:
        raise ShapeError(f"input {h}x{w} too small for the residual stem")
    widths = cfg.widths.get("resnet", RESNET_WIDTHS[cfg.preset])
    p = BACKBONE
    g = LayerGraph(cfg.input_shape, cfg.seed)
    _conv_bn_relu(g, f"{p}.stem", cfg, widths["stem"], 7, 2)
    g.add(f"{p}.stem.pool", MaxPool2D(3, 2, padding=1))
    in_ch = widths["stem"]
    for s, (width, blocks) in enumerate(zip(widths["stages"], RESNET_BLOCKS), start=1):
        for b in range(1, blocks + 1):
            stride = 2 if (b == 1 and s > 1) else 1
            project = b == 1 and (stride != 1 or in_ch != width * RESNET_EXPANSION)
            _bottleneck(g, f"{p}.stage{s}.block{b}", cfg, width, stride, project)
            in_ch = width * RESNET_EXPANSION
    if cfg.pooled_features:
        g.add(f"{p}.gap", GlobalAvgPool())
    g.validate()
    return g


def _inception_module(g, prefix, cfg, widths):
    x = g.output_id
    w1, (r3, w3), (r5, w5), wp = widths
    b1 = _conv_bn_relu(g, f"{prefix}.b1", cfg, w1, 1, inputs=x)
    _conv_bn_relu(g, f"{prefix}.b3.reduce", cfg, r3, 1, inputs=x)
    b3 = _conv_bn_relu(g, f"{prefix}.b3", cfg, w3, 3)
    _conv_bn_relu(g, f"{prefix}.b5.reduce", cfg, r5, 1, inputs=x)
    if cfg.factor_5x5:
        _conv_bn_relu(g, f"{prefix}.b5.a", cfg, w5, 3)
        b5 = _conv_bn_relu(g, f"{prefix}.b5.b", cfg, w5, 3)
    else:
        b5 = _conv_bn_relu(g, f"{prefix}.b5", cfg, w5, 5)
    g.add(f"{prefix}.pool", MaxPool2D(3, 1, padding=1), x)
    bp = _conv_bn_relu(g, f"{prefix}.bp", cfg, wp, 1)
    g.add(f"{prefix}.concat", ChannelConcat(), (b1, b3, b5, bp))
    return g.output_id


def build_inception_backbone(cfg: ArchitectureConfig) -> LayerGraph:
    """Strided conv stem followed by a stack of four-branch inception modules."""
    h, w, _ = cfg.input_shape
    if h < 4 or w < 4:
        raise ShapeError(f"input {h}x{w} too small for the inception stem")
    widths = cfg.widths.get("inception", INCEPTION_WIDTHS[cfg.preset])
    s1, s2, s3, s4, s5 = widths["stem"]
    p = BACKBONE
    g = LayerGraph(cfg.input_shape, cfg.seed)
    _conv_bn_relu(g, f"{p}.stem1", cfg, s1, 3, 2)
    _conv_bn_relu(g, f"{p}.stem2", cfg, s2, 3)
    _conv_bn_relu(g, f"{p}.stem3", cfg, s3, 3)
    g.add(f"{p}.stem.pool1", MaxPool2D(3, 2, padding=1))
    _conv_bn_relu(g, f"{p}.stem4", cfg, s4, 1)
    _conv_bn_relu(g, f"{p}.stem5", cfg, s5, 3)
    g.add(f"{p}.stem.pool2", MaxPool2D(3, 2, padding=1))
    for i, mod in enumerate(widths["modules"], start=1):
        _inception_module(g, f"{p}.mixed{i}", cfg, mod)
    if cfg.pooled_features:
        g.add(f"{p}.gap", GlobalAvgPool())
    g.validate()
    return g


def attach_transfer_head(backbone: LayerGraph, head: str, num_classes: int,
                         freeze_backbone: bool = False, *, dropout: float = 0.5,
                         hidden_units: int = 16) -> LayerGraph:
    """Append a classifier head (in place) and optionally freeze everything before it.

    ``"resnet"``: Flatten, Dense(16) + ReLU, Dropout, Dense(K) + Softmax.
    ``"inception"``: Flatten, Dense(K) + Softmax.
    """
    if backbone.head_attached or any(n.id.startswith(HEAD + ".") for n in backbone.nodes):
        raise GraphError("a head is already attached to this graph")
    if head not in ("resnet", "inception"):
        raise ConfigError(f"unknown head kind {head!r}")
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if freeze_backbone:
        backbone.freeze()
    g = backbone
    g.add(f"{HEAD}.flatten", Flatten())
    if head == "resnet":
        g.add(f"{HEAD}.dense1", Dense(hidden_units))
        g.add(f"{HEAD}.relu1", ReLU())
        g.add(f"{HEAD}.drop1", Dropout(dropout))
    g.add(f"{HEAD}.logits", Dense(num_classes))
    g.add(f"{HEAD}.softmax", Softmax())
    g.head_attached = True
    g.validate()
    return g


def build_residual_net(cfg: ArchitectureConfig, freeze_backbone: bool = False) -> LayerGraph:
    return attach_transfer_head(build_residual_backbone(cfg), "resnet", cfg.num_classes,
                                freeze_backbone, dropout=cfg.head_dropout)


def build_inception_net(cfg: ArchitectureConfig, freeze_backbone: bool = False) -> LayerGraph:
    return attach_transfer_head(build_inception_backbone(cfg), "inception", cfg.num_classes,
                                freeze_backbone)


def build(arch: str, cfg: ArchitectureConfig, freeze_backbone: bool = False) -> LayerGraph:
    if arch == "baseline":
        if freeze_backbone:
            raise ConfigError("the baseline has no backbone to freeze")
        return build_baseline(cfg)
    if arch == "resnet":
        return build_residual_net(cfg, freeze_backbone)
    if arch == "inception":
        return build_inception_net(cfg, freeze_backbone)
    raise ConfigError(f"unknown architecture {arch!r}; choose from {ARCHES}")
