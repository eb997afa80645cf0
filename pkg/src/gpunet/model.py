"""GP-Unet: a 3D encoder/decoder regression network trained on lesion counts.

Train mode collapses the final feature maps with a global pooling layer and
a 1x1x1 convolution into one count estimate.  Test mode drops the pooling
and applies the same 1x1x1 weights voxel-wise, giving a heatmap with the
input's resolution.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (
    DTYPE,
    ConvParams,
    ShapeError,
    Tensor,
    concat_channels,
    conv3d,
    global_pool,
    linear,
    maxpool3d,
    no_grad,
    relu,
    upsample3d,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 2
    base_features: int = 8
    final_maps: int = 8
    pooling_mode: str = "max"
    input_dims: tuple[int, int, int] = (32, 32, 16)
    upsampling: bool = True
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_features < 1 or self.final_maps < 1 or self.in_channels < 1:
            raise ConfigError("feature counts must be >= 1")
        if self.pooling_mode not in ("max", "avg"):
            raise ConfigError(f"pooling_mode must be 'max' or 'avg', got {self.pooling_mode!r}")
        if len(self.input_dims) != 3:
            raise ConfigError(f"input_dims needs 3 extents, got {self.input_dims}")
        step = 2 ** self.levels
        for axis, d in zip("xyz", self.input_dims):
            if d < step or d % step:
                raise ConfigError(
                    f"input extent {d} along {axis} is not a positive multiple of 2^levels = {step}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def layer_specs(config: NetworkConfig) -> list[tuple[str, int, int, int]]:
    """Ordered (name, in_channels, out_channels, kernel_extent) for every
    convolution, ending with the 1x1x1 count head."""
    F, L = config.base_features, config.levels
    specs = []
    c = config.in_channels
    for lvl in range(L):
        width = F * 2 ** lvl
        specs += [(f"enc{lvl}.conv0", c, width, 3), (f"enc{lvl}.conv1", width, width, 3)]
        c = width
    bottom = F * 2 ** L
    last_bottom = bottom if config.upsampling else config.final_maps
    specs += [("bottom.conv0", c, bottom, 3), ("bottom.conv1", bottom, last_bottom, 3)]
    c = last_bottom
    if config.upsampling:
        for lvl in reversed(range(L)):
            width = F * 2 ** lvl
            out = config.final_maps if lvl == 0 else width
            specs += [(f"dec{lvl}.conv0", c + width, width, 3), (f"dec{lvl}.conv1", width, out, 3)]
            c = out
    specs.append(("head", c, 1, 1))
    return specs


def parameter_count(config: NetworkConfig) -> int:
    return sum(o * i * k ** 3 + o for _, i, o, k in layer_specs(config))


class GPUNet:
    """Parameters plus the forward passes that share them."""

    def __init__(self, config: NetworkConfig, params: dict[str, ConvParams]):
        self.config = config
        self.params = params
        expected = [name for name, *_ in layer_specs(config)]
        if list(params) != expected:
            raise ShapeError(f"parameter names {list(params)} do not match layer list {expected}")
        for name, cin, cout, k in layer_specs(config):
            shape = params[name].kernel.shape
            if shape != (cout, cin, k, k, k):
                raise ShapeError(f"{name}: kernel shape {shape}, expected {(cout, cin, k, k, k)}")

    @property
    def head(self) -> ConvParams:
        return self.params["head"]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, p in self.params.items():
            out += [(f"{name}.kernel", p.kernel), (f"{name}.bias", p.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def copy(self) -> "GPUNet":
        params = {name: ConvParams(Tensor(p.kernel.data.copy(), requires_grad=True),
                                   Tensor(p.bias.data.copy(), requires_grad=True))
                  for name, p in self.params.items()}
        return GPUNet(self.config, params)

    def _check_input(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = Tensor(x.data[None, None], requires_grad=x.requires_grad)
        if x.ndim != 5:
            raise ShapeError(f"input must have 5 axes (batch, channel, x, y, z), got {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"input axis 'channel' has {x.shape[1]} entries, "
                             f"network expects {self.config.in_channels}")
        for axis, got, want in zip("xyz", x.shape[2:], self.config.input_dims):
            if got != want:
                raise ShapeError(f"input axis '{axis}' has extent {got}, network expects {want}")
        return x

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        x = relu(conv3d(x, self.params[f"{prefix}.conv0"]))
        return relu(conv3d(x, self.params[f"{prefix}.conv1"]))

    def forward_features(self, x: Tensor) -> Tensor:
        """The n non-negative feature maps that enter global pooling.

        Full input resolution when the decoder is present; ``1 / 2**levels``
        resolution for the encoder-only variant.
        """
        x = self._check_input(x)
        skips = []
        for lvl in range(self.config.levels):
            x = self._block(x, f"enc{lvl}")
            skips.append(x)
            x = maxpool3d(x)
        x = self._block(x, "bottom")
        if self.config.upsampling:
            for lvl in reversed(range(self.config.levels)):
                x = concat_channels(upsample3d(x), skips[lvl])
                x = self._block(x, f"dec{lvl}")
        return x

    def forward_train(self, x: Tensor) -> Tensor:
        """Count estimate per batch item, shape (batch, 1)."""
        f = self.forward_features(x)
        return linear(global_pool(f, self.config.pooling_mode), self.head)

    def forward_test(self, x: Tensor) -> Tensor:
        """Heatmap sum_i w_i f_i (no bias), shape (batch, 1, *spatial)."""
        return conv3d(self.forward_features(x), self.head, bias=False)

    def predict(self, volume: np.ndarray) -> tuple[float, np.ndarray]:
        """Count estimate and heatmap for one 3D volume, sharing one feature pass."""
        with no_grad():
            f = self.forward_features(Tensor(volume))
            count = linear(global_pool(f, self.config.pooling_mode), self.head).item()
            heatmap = conv3d(f, self.head, bias=False).data[0, 0]
        return count, np.array(heatmap)


def build(config: NetworkConfig, seed: int = 0) -> GPUNet:
    """Gaussian N(0, 2 / fan_in) kernels and zero biases, deterministic per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, k in layer_specs(config):
        fan_in = cin * k ** 3
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k)).astype(DTYPE)
        params[name] = ConvParams(Tensor(kernel, requires_grad=True),
                                  Tensor(np.zeros(cout, dtype=DTYPE), requires_grad=True))
    return GPUNet(config, params)
