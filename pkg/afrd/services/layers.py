import math
from typing import Iterator

import numpy as np

from afrd.services import tensor as T
from afrd.services.tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Holds named parameters, running buffers and child layers in insertion order."""

    def __init__(self):
        self.training = False
        self.frozen = False
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, "Layer"] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        param = Tensor(data, requires_grad=True, name=name)
        self._params[name] = param
        return param

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        buf = np.asarray(data, dtype=T.get_default_dtype()).copy()
        self._buffers[name] = buf
        return buf

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for child_name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode and not self.frozen
        for child in self._children.values():
            child.train(mode and not self.frozen)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def freeze(self) -> "Layer":
        """Stop gradients for good and pin running statistics (eval mode forever)."""
        self.frozen = True
        self.training = False
        for param in self._params.values():
            param.requires_grad = False
        for child in self._children.values():
            child.freeze()
        return self

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, stride=1, padding=0, rng):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param("weight", he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, *, stride=1, padding=0, rng):
        super().__init__()
        self.stride = stride
        self.padding = padding
        # each output pixel sees in_ch * (kernel / stride)^2 inputs
        fan_in = max(in_ch * kernel * kernel / (stride * stride), 1.0)
        self.weight = self.add_param("weight", he_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, *, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, *, rng):
        super().__init__()
        self.weight = self.add_param("weight", he_uniform(rng, (out_features, in_features), in_features))
        self.bias = self.add_param("bias", np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvBnRelu(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, *, stride=1, rng):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, rng=rng))
        self.bn = self.add_child("bn", BatchNorm2d(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class UpBnRelu(Layer):
    """2x upsampling with a stride-2 transposed convolution."""

    def __init__(self, in_ch: int, out_ch: int, *, rng):
        super().__init__()
        self.up = self.add_child("up", ConvTranspose2d(in_ch, out_ch, 2, stride=2, rng=rng))
        self.bn = self.add_child("bn", BatchNorm2d(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.up(x)))


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def __len__(self) -> int:
        return len(self.layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
