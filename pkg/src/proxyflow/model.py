"""Hourglass encoder-decoder with concatenative side channels.

Five encoder blocks of three 3x3 convs each (2x2 max-pool between), a
two-conv bottleneck, and five decoder blocks of two convs each. Every conv
and transposed conv is followed by batch norm and a leaky ReLU except the
final head conv, which directly emits the prediction (1 channel for center
frame interpolation, 2 for optical flow).

The per-block channel widths are a declarative spec so the same code builds
the full-width network and slimmed-down variants for small experiments.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch
import torch.nn as nn

from .data import denormalize, normalize_sample

DEFAULT_ENCODER_CHANNELS = (128, 128, 256, 256, 512)
DEFAULT_BOTTLENECK_CHANNELS = 1024
DEFAULT_DECODER_CONV_CHANNELS = (1024, 512, 512, 256, 256)  # Dec5..Dec1 internal width
DEFAULT_DECODER_INPUT_CHANNELS = (1024, 1024, 512, 512, 256)  # Dec5..Dec1 post-concat
DEFAULT_SKIP_PLAN = ((5, 5), (4, 4), (3, 3), (2, 2), (1, 1))  # (encoder block, decoder block)

HEADS = {"interpolation": 1, "flow": 2}


@dataclass(frozen=True)
class NetworkSpec:
    n_input_frames: int = 4
    conv_block_channels: tuple[int, ...] = DEFAULT_ENCODER_CHANNELS
    bottleneck_channels: int = DEFAULT_BOTTLENECK_CHANNELS
    decoder_conv_channels: tuple[int, ...] = DEFAULT_DECODER_CONV_CHANNELS
    decoder_input_channels: tuple[int, ...] = DEFAULT_DECODER_INPUT_CHANNELS
    skip_plan: tuple[tuple[int, int], ...] = DEFAULT_SKIP_PLAN
    head: str = "interpolation"
    leaky_relu_slope: float = 0.1
    input_resolution: tuple[int, int] = (384, 192)  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "conv_block_channels", tuple(self.conv_block_channels))
        object.__setattr__(self, "decoder_conv_channels", tuple(self.decoder_conv_channels))
        object.__setattr__(self, "decoder_input_channels", tuple(self.decoder_input_channels))
        object.__setattr__(self, "skip_plan", tuple(tuple(p) for p in self.skip_plan))
        object.__setattr__(self, "input_resolution", tuple(self.input_resolution))
        self._validate()

    def _validate(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {sorted(HEADS)}")
        if self.n_input_frames < 1:
            raise ValueError("n_input_frames must be >= 1")
        n = self.n_blocks
        if not (len(self.decoder_conv_channels) == len(self.decoder_input_channels) == len(self.skip_plan) == n):
            raise ValueError("encoder/decoder block counts out of step")
        for c in (*self.conv_block_channels, self.bottleneck_channels,
                  *self.decoder_conv_channels, *self.decoder_input_channels):
            if c < 1:
                raise ValueError("all channel counts must be positive")
        w, h = self.input_resolution
        div = self.resolution_divisor
        if w % div or h % div:
            raise ValueError(f"input resolution {w}x{h} must be divisible by {div}")
        # each decoder's declared input must leave room for its skip channels
        for dec_idx in range(n):
            skip_ch = self._skip_channels(dec_idx)
            declared = self.decoder_input_channels[dec_idx]
            if declared <= skip_ch:
                name = self.decoder_names[dec_idx]
                raise ValueError(
                    f"channel arithmetic inconsistent at {name}: declared input {declared} "
                    f"leaves no room for {skip_ch} skip channels"
                )

    @property
    def n_blocks(self) -> int:
        return len(self.conv_block_channels)

    @property
    def resolution_divisor(self) -> int:
        return 2**self.n_blocks

    @property
    def head_channels(self) -> int:
        return HEADS[self.head]

    @property
    def encoder_names(self) -> tuple[str, ...]:
        return tuple(f"conv{i + 1}" for i in range(self.n_blocks))

    @property
    def decoder_names(self) -> tuple[str, ...]:
        return tuple(f"dec{self.n_blocks - i}" for i in range(self.n_blocks))

    def _skip_source(self, dec_idx: int) -> int:
        """Encoder block index (0-based) feeding decoder list position dec_idx."""
        dec_block = self.n_blocks - dec_idx
        for enc, dec in self.skip_plan:
            if dec == dec_block:
                return enc - 1
        raise ValueError(f"skip plan has no entry for dec{dec_block}")

    def _skip_channels(self, dec_idx: int) -> int:
        return self.conv_block_channels[self._skip_source(dec_idx)]

    def upsample_channels(self, dec_idx: int) -> int:
        """Output width of the transposed conv feeding decoder list position dec_idx."""
        return self.decoder_input_channels[dec_idx] - self._skip_channels(dec_idx)

    @classmethod
    def scaled(cls, divisor: int, **overrides) -> "NetworkSpec":
        """Width-scaled variant for desk-scale runs; divisor must divide 128."""
        if 128 % divisor:
            raise ValueError(f"divisor {divisor} must divide 128")
        return cls(
            conv_block_channels=tuple(c // divisor for c in DEFAULT_ENCODER_CHANNELS),
            bottleneck_channels=DEFAULT_BOTTLENECK_CHANNELS // divisor,
            decoder_conv_channels=tuple(c // divisor for c in DEFAULT_DECODER_CONV_CHANNELS),
            decoder_input_channels=tuple(c // divisor for c in DEFAULT_DECODER_INPUT_CHANNELS),
            **overrides,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(**data)


class _ConvUnit(nn.Module):
    """Conv (or 2x transposed conv) + batch norm + leaky ReLU."""

    def __init__(self, cin: int, cout: int, slope: float, transposed: bool = False):
        super().__init__()
        if transposed:
            self.conv = nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1)
        else:
            self.conv = nn.Conv2d(cin, cout, kernel_size=3, padding=1)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class InterpFlowNet(nn.Module):
    """The hourglass network; fully convolutional over multiple-of-divisor sizes."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        s = spec.leaky_relu_slope

        self.enc = nn.ModuleDict()
        cin = spec.n_input_frames
        for name, cout in zip(spec.encoder_names, spec.conv_block_channels):
            self.enc[name] = nn.Sequential(
                _ConvUnit(cin, cout, s), _ConvUnit(cout, cout, s), _ConvUnit(cout, cout, s)
            )
            cin = cout
        self.pool = nn.MaxPool2d(2)

        bc = spec.bottleneck_channels
        self.bottleneck = nn.Sequential(_ConvUnit(cin, bc, s), _ConvUnit(bc, bc, s))

        # transposed convs keyed by producing block; output widths are set so
        # that concatenation with the skip matches each decoder's declared input
        self.up = nn.ModuleDict()
        self.dec = nn.ModuleDict()
        up_src_width = bc
        up_src_name = "bottleneck"
        for dec_idx, name in enumerate(spec.decoder_names):
            self.up[up_src_name] = _ConvUnit(
                up_src_width, spec.upsample_channels(dec_idx), s, transposed=True
            )
            width = spec.decoder_conv_channels[dec_idx]
            convs = [_ConvUnit(spec.decoder_input_channels[dec_idx], width, s)]
            if name != "dec1":
                convs.append(_ConvUnit(width, width, s))
            else:
                pass  # dec1's second conv is the head below
            self.dec[name] = nn.Sequential(*convs)
            up_src_width = width
            up_src_name = name

        self.head = nn.Conv2d(spec.decoder_conv_channels[-1], spec.head_channels, 3, padding=1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(
                    m.weight, a=self.spec.leaky_relu_slope, mode="fan_in", nonlinearity="leaky_relu"
                )
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        unbatched = frames.ndim == 3
        if unbatched:
            frames = frames.unsqueeze(0)
        if frames.ndim != 4 or frames.shape[1] != self.spec.n_input_frames:
            raise ValueError(
                f"expected {self.spec.n_input_frames} input frames per sample, got shape {tuple(frames.shape)}"
            )
        h, w = frames.shape[-2:]
        div = self.spec.resolution_divisor
        if h % div or w % div:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {div}")

        skips: dict[str, torch.Tensor] = {}
        x = frames
        for name, block in self.enc.items():
            x = block(x)
            skips[name] = x
            x = self.pool(x)
        x = self.bottleneck(x)

        up_src = "bottleneck"
        for dec_idx, name in enumerate(self.spec.decoder_names):
            x = self.up[up_src](x)
            skip = skips[f"conv{self.spec._skip_source(dec_idx) + 1}"]
            x = torch.cat([x, skip], dim=1)
            x = self.dec[name](x)
            up_src = name
        out = self.head(x)
        return out.squeeze(0) if unbatched else out


def build_network(spec: NetworkSpec) -> InterpFlowNet:
    return InterpFlowNet(spec)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def swap_head(net: InterpFlowNet) -> InterpFlowNet:
    """Replace the final conv with a fresh 2-channel one; all else bit-identical."""
    if net.spec.head != "interpolation":
        raise ValueError(f"can only swap an interpolation head, network has head={net.spec.head!r}")
    flow_net = build_network(replace(net.spec, head="flow"))
    state = {k: v for k, v in net.state_dict().items() if not k.startswith("head.")}
    missing, unexpected = flow_net.load_state_dict(state, strict=False)
    assert not unexpected and all(k.startswith("head.") for k in missing)
    return flow_net


def trace_shapes(net: InterpFlowNet, frames: torch.Tensor) -> dict[str, dict[str, tuple]]:
    """Record (input, output) shapes of every named block during one forward pass."""
    trace: dict[str, dict[str, tuple]] = {}
    handles = []

    def hook(name):
        def fn(module, inputs, output):
            trace[name] = {"in": tuple(inputs[0].shape), "out": tuple(output.shape)}
        return fn

    for name, block in net.enc.items():
        handles.append(block.register_forward_hook(hook(name)))
    handles.append(net.bottleneck.register_forward_hook(hook("bottleneck")))
    for name, block in net.dec.items():
        handles.append(block.register_forward_hook(hook(name)))
    handles.append(net.head.register_forward_hook(hook("head")))
    try:
        net.eval()
        with torch.no_grad():
            net(frames)
    finally:
        for h in handles:
            h.remove()
    return trace


def interpolate_frame(net: InterpFlowNet, quad: np.ndarray) -> np.ndarray:
    """Predict the center frame from a grayscale quadruple (4, H, W) in raw intensities."""
    if net.spec.head != "interpolation":
        raise ValueError(f"needs an interpolation head, network has head={net.spec.head!r}")
    normed, stats = normalize_sample(quad)
    net.eval()
    with torch.no_grad():
        out = net(torch.from_numpy(normed))
    return denormalize(out.squeeze(0).numpy(), stats)


def interpolate_color(net: InterpFlowNet, frames: np.ndarray) -> np.ndarray:
    """Run the grayscale network once per color channel of a (4, H, W, 3) quadruple."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] != net.spec.n_input_frames or frames.shape[-1] != 3:
        raise ValueError(f"expected ({net.spec.n_input_frames}, H, W, 3) color quadruple, got {frames.shape}")
    channels = [interpolate_frame(net, frames[..., c]) for c in range(3)]
    return np.stack(channels, axis=-1)
