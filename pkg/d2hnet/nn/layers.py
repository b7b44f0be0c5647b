"""
Parameter containers and the building blocks shared by both networks.
"""
from typing import Iterator, Mapping, Optional

import numpy as np

from d2hnet import config
from d2hnet.core.ops import ConvParams, DeformOffsets, add, conv2d, deform_conv2d, leaky_relu
from d2hnet.core.tensor import GradNode
from d2hnet.utils.errors import ShapeError


class Module:
    """Owns named GradNode parameters and child modules."""

    def __init__(self):
        self._params: dict[str, GradNode] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> GradNode:
        node = GradNode.leaf(value, requires_grad=True, name=name)
        self._params[name] = node
        return node

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, GradNode]]:
        for name, node in self._params.items():
            yield f"{prefix}{name}", node
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> dict[str, GradNode]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(p.value.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{name}": p.value for name, p in self.named_parameters()}

    def load_state_dict(self, entries: Mapping[str, np.ndarray], prefix: str = "") -> None:
        """Copy values in place; every parameter must be present with its shape."""
        for name, p in self.named_parameters():
            key = f"{prefix}{name}"
            if key not in entries:
                raise ValueError(f"checkpoint has no entry '{key}'")
            value = entries[key]
            if value.shape != p.value.shape:
                raise ShapeError(f"checkpoint entry '{key}' has shape {value.shape}, expected {p.value.shape}")
            p.value[...] = value

    def zero_(self) -> "Module":
        for _, p in self.named_parameters():
            p.value[...] = 0
        return self


class Conv2d(Module):
    """Square-kernel convolution with size-preserving padding at stride 1."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        gain: float = 1.0,
        slope: float = config.LEAKY_SLOPE,
        dtype=np.float32,
    ):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        fan_in = in_channels * kernel_size * kernel_size
        std = gain * np.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = self.add_param("weight", (rng.standard_normal(shape) * std).astype(dtype))
        self.bias = self.add_param("bias", np.zeros(out_channels, dtype=dtype))
        self.stride = stride
        self.padding = (kernel_size - 1) // 2
        self.in_channels = in_channels
        self.out_channels = out_channels

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, stride=self.stride, padding=self.padding)

    def __call__(self, x) -> GradNode:
        return conv2d(x, self.params)


class DeformConv2d(Conv2d):
    """Modulated deformable convolution; offsets come from the caller."""

    def __call__(self, x, offsets: Optional[DeformOffsets] = None) -> GradNode:
        if offsets is None:
            return conv2d(x, self.params)
        return deform_conv2d(x, self.params, offsets)


class ResidualLayer(Module):
    """x + conv(lrelu(conv(x)))."""

    def __init__(self, channels: int, rng: np.random.Generator, slope: float = config.LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.slope = slope
        self.conv1 = self.add_module("conv1", Conv2d(channels, channels, 3, rng, slope=slope, dtype=dtype))
        # second conv starts small so stacked blocks stay near identity
        self.conv2 = self.add_module("conv2", Conv2d(channels, channels, 3, rng, gain=0.1, slope=slope, dtype=dtype))

    def __call__(self, x) -> GradNode:
        return add(x, self.conv2(leaky_relu(self.conv1(x), self.slope)))


class ResidualBlock(Module):
    """A chain of residual layers."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        layers: int = config.RESIDUAL_LAYERS,
        slope: float = config.LEAKY_SLOPE,
        dtype=np.float32,
    ):
        super().__init__()
        self.layers = [
            self.add_module(f"layer{i}", ResidualLayer(channels, rng, slope, dtype))
            for i in range(layers)
        ]

    def __call__(self, x) -> GradNode:
        for layer in self.layers:
            x = layer(x)
        return x
