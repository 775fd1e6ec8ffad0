"""Two-stream SegNet-style encoder-decoder.

Each input stream runs through its own five-block encoder (conv + BN +
PReLU repeated, then 2x2 max pool). The two bottlenecks are concatenated
along channels and decoded by a single mirrored decoder that unpools with
the pooling indices of stream A and ends in a k-channel 3x3 classifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    ConvLayerState,
    PoolIndices,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    max_unpool2x2,
    maxpool2x2,
    prelu,
)

NUM_BLOCKS = 5
DOWNSAMPLE = 2**NUM_BLOCKS


@dataclass(frozen=True)
class NetworkConfig:
    input_channels_a: int = 1
    input_channels_b: int = 1
    num_classes: int = 2
    encoder_widths: tuple = (32, 64, 128, 256, 256)
    convs_per_block: tuple = (2, 2, 3, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "convs_per_block", tuple(int(n) for n in self.convs_per_block))
        if self.input_channels_a < 1 or self.input_channels_b < 1:
            raise ValueError("input channel counts must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.encoder_widths) != NUM_BLOCKS or any(w < 1 for w in self.encoder_widths):
            raise ValueError(f"encoder_widths needs {NUM_BLOCKS} positive entries, got {self.encoder_widths}")
        if len(self.convs_per_block) != NUM_BLOCKS or any(n not in (2, 3) for n in self.convs_per_block):
            raise ValueError(f"convs_per_block needs {NUM_BLOCKS} entries from {{2, 3}}, got {self.convs_per_block}")

    def to_dict(self) -> dict:
        return {
            "input_channels_a": self.input_channels_a,
            "input_channels_b": self.input_channels_b,
            "num_classes": self.num_classes,
            "encoder_widths": list(self.encoder_widths),
            "convs_per_block": list(self.convs_per_block),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


MINIATURE_WIDTHS = (8, 16, 32, 32, 32)


def encoder_layout(cfg: NetworkConfig, in_ch: int) -> list[list[tuple[int, int]]]:
    """(in, out) channels of every encoder conv, block by block."""
    layout = []
    for width, n in zip(cfg.encoder_widths, cfg.convs_per_block):
        block = [(in_ch, width)] + [(width, width)] * (n - 1)
        layout.append(block)
        in_ch = width
    return layout


def decoder_layout(cfg: NetworkConfig) -> list[list[tuple[int, int]]]:
    """(in, out) channels of every decoder conv, deepest block first.

    The deepest block sees the concatenated bottleneck (2 x last width).
    Block d ends on the width of block d-1; the shallowest ends on k.
    """
    widths = cfg.encoder_widths
    layout = []
    in_ch = 2 * widths[-1]
    for d in range(NUM_BLOCKS - 1, -1, -1):
        n = cfg.convs_per_block[d]
        out_last = widths[d - 1] if d > 0 else cfg.num_classes
        block = [(in_ch, widths[d])] + [(widths[d], widths[d])] * (n - 2) + [(widths[d], out_last)]
        layout.append(block)
        in_ch = out_last
    return layout


@dataclass
class NetworkParams:
    """Complete learnable state of one network."""

    config: NetworkConfig
    seed: int
    enc_a: list = field(default_factory=list)
    enc_b: list = field(default_factory=list)
    dec: list = field(default_factory=list)

    def layers(self):
        """(name, ConvLayerState) for every conv, in a fixed order."""
        for prefix, blocks in (("enc_a", self.enc_a), ("enc_b", self.enc_b), ("dec", self.dec)):
            for bi, block in enumerate(blocks):
                for li, layer in enumerate(block):
                    yield f"{prefix}.{bi}.{li}", layer

    def trainable(self) -> list[Tensor]:
        return [t for _, layer in self.layers() for t in layer.trainable()]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers():
            for field_name, t in layer.tensors().items():
                out[f"{name}.{field_name}"] = t
        return out

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.trainable()))

    def head(self) -> ConvLayerState:
        return self.dec[-1][-1]

    def astype(self, dtype) -> "NetworkParams":
        conv = lambda blocks: [[layer.astype(dtype) for layer in block] for block in blocks]  # noqa: E731
        return NetworkParams(self.config, self.seed, conv(self.enc_a), conv(self.enc_b), conv(self.dec))

    @classmethod
    def from_named_tensors(cls, cfg: NetworkConfig, seed: int, tensors: dict) -> "NetworkParams":
        """Inverse of :meth:`named_tensors` for a matching config."""
        params = build_network(cfg, seed)
        expected = params.named_tensors()
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"tensor set does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, layer in params.layers():
            for field_name, t in layer.tensors().items():
                src = tensors[f"{name}.{field_name}"]
                if src.shape != t.shape:
                    raise ValueError(f"{name}.{field_name}: shape {src.shape} != expected {t.shape}")
                setattr(layer, field_name, Tensor(src.data.copy(), requires_grad=t.requires_grad))
        return params


def _layer_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(index,))


def build_network(cfg: NetworkConfig, seed: int) -> NetworkParams:
    """Fresh parameters: He-initialised kernels, zero biases, BN (1, 0), PReLU 0.25."""
    counter = iter(range(10**6))

    def make(layout, final_head=False):
        blocks = []
        for bi, block in enumerate(layout):
            layers = []
            for li, (cin, cout) in enumerate(block):
                is_head = final_head and bi == len(layout) - 1 and li == len(block) - 1
                layers.append(ConvLayerState.create(cin, cout, _layer_seed(seed, next(counter)), activation=not is_head))
            blocks.append(layers)
        return blocks

    return NetworkParams(
        config=cfg,
        seed=int(seed),
        enc_a=make(encoder_layout(cfg, cfg.input_channels_a)),
        enc_b=make(encoder_layout(cfg, cfg.input_channels_b)),
        dec=make(decoder_layout(cfg), final_head=True),
    )


def _apply_layer(x: Tensor, layer: ConvLayerState, mode: str) -> Tensor:
    x = conv2d(x, layer)
    if layer.has_activation:
        x = batchnorm(x, layer, mode)
        x = prelu(x, layer.prelu_slope)
    return x


def encode(blocks, x: Tensor, mode: str = "train") -> tuple[Tensor, list[PoolIndices]]:
    """Run one encoder; returns the bottleneck and the per-block pool indices."""
    indices = []
    for block in blocks:
        for layer in block:
            x = _apply_layer(x, layer, mode)
        x, idx = maxpool2x2(x)
        indices.append(idx)
    return x, indices


def check_input(stream_a: Tensor, stream_b: Tensor, cfg: NetworkConfig) -> None:
    if stream_a.data.ndim != 4 or stream_b.data.ndim != 4:
        raise ValueError("streams must be [N, C, H, W]")
    if stream_a.shape[0] != stream_b.shape[0] or stream_a.shape[2:] != stream_b.shape[2:]:
        raise ValueError(f"streams differ in batch or spatial size: {stream_a.shape} vs {stream_b.shape}")
    if stream_a.shape[1] != cfg.input_channels_a or stream_b.shape[1] != cfg.input_channels_b:
        raise ValueError(
            f"stream channels {stream_a.shape[1]}/{stream_b.shape[1]} do not match config "
            f"{cfg.input_channels_a}/{cfg.input_channels_b}"
        )
    h, w = stream_a.shape[2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        ph = (-h) % DOWNSAMPLE
        pw = (-w) % DOWNSAMPLE
        raise ValueError(
            f"H and W must be multiples of {DOWNSAMPLE}, got {h}x{w}; pad by {ph} rows and {pw} columns"
        )


def forward(params: NetworkParams, stream_a: Tensor, stream_b: Tensor, mode: str = "train",
            bottleneck: Optional[list] = None) -> Tensor:
    """Logits [N, k, H, W] for a pair of input streams.

    ``mode`` is ``"train"`` (batch statistics) or ``"infer"`` (running
    statistics). If ``bottleneck`` is a list, the concatenated bottleneck
    tensor is appended to it.
    """
    check_input(stream_a, stream_b, params.config)
    xa, idx_a = encode(params.enc_a, stream_a, mode)
    xb, _ = encode(params.enc_b, stream_b, mode)
    x = concat_channels(xa, xb)
    if bottleneck is not None:
        bottleneck.append(x)
    for depth, block in zip(range(NUM_BLOCKS - 1, -1, -1), params.dec):
        idx = idx_a[depth]
        if x.shape[1] != idx.shape[1]:
            # the concatenated bottleneck carries both streams; both halves
            # are placed at stream A's argmax positions
            idx = idx.tile_channels(x.shape[1] // idx.shape[1])
        x = max_unpool2x2(x, idx)
        for layer in block:
            x = _apply_layer(x, layer, mode)
    return x


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over classes; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1).astype(np.int64)
