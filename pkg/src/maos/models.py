"""Generator and discriminator builders.

Generators follow the ResNet-style image translator: a 7x7 stem, two
stride-2 downsampling convolutions, residual blocks, two transposed
convolutions back to full size and a 7x7 output convolution into tanh.

Discriminators are PatchGAN-style strided stacks split into ``n_threads``
weak learners. Each thread owns a slice of every weight tensor: the input
image is tiled once per thread and every convolution is grouped, so thread
``t`` never sees another thread's activations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
DEFAULT_DEPTH = {"global": 4, "part": 3, "source": 4}


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | conv_t | norm | act | res
    name: str = ""
    stride: int = 1
    padding: int = 0
    groups: int = 1
    act: str = ""
    slope: float = 0.2
    body: tuple = ()


def _act(x: Tensor, layer: Layer) -> Tensor:
    if layer.act == "relu":
        return T.relu(x)
    if layer.act == "leaky_relu":
        return T.leaky_relu(x, layer.slope)
    if layer.act == "tanh":
        return T.tanh(x)
    raise ValueError(f"unknown activation {layer.act!r}")


def _run(layers, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    for layer in layers:
        if layer.kind == "conv":
            x = T.conv2d(x, params[layer.name + ".w"], params[layer.name + ".b"],
                         stride=layer.stride, padding=layer.padding, groups=layer.groups)
        elif layer.kind == "conv_t":
            x = T.conv_transpose2d(x, params[layer.name + ".w"], params[layer.name + ".b"],
                                   stride=layer.stride, padding=layer.padding, output_padding=1)
        elif layer.kind == "norm":
            x = T.instance_norm(x)
        elif layer.kind == "act":
            x = _act(x, layer)
        elif layer.kind == "res":
            x = T.add(x, _run(layer.body, x, params))
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return x


class _ParamInit:
    """Seeded N(0, 0.02) weights and zero biases, one RNG stream per tensor."""

    def __init__(self, seed: int):
        self.seed = seed
        self.count = 0
        self.params: dict[str, Tensor] = {}

    def conv(self, name: str, shape: tuple[int, ...], bias: int) -> None:
        rng = np.random.default_rng([self.seed, self.count])
        self.count += 1
        self.params[name + ".w"] = Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True,
                                          name=name + ".w")
        self.params[name + ".b"] = Tensor(np.zeros(bias), requires_grad=True, name=name + ".b")


SKIP_SHRINK = 0.8


@dataclass
class GeneratorNet:
    layers: list[Layer]
    params: dict[str, Tensor]
    base_width: int
    n_res_blocks: int
    io_channels: tuple[int, int] = (3, 3)
    input_skip: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.io_channels[0]:
            raise T.ShapeError(f"generator expects [N,3,H,W], got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise T.ShapeError(f"generator needs H, W divisible by 4, got {x.shape[2:]}")
        if not self.input_skip:
            return _run(self.layers, x, self.params)
        # tanh(o + atanh(k x)) is k x when o = 0 and never leaves (-1, 1)
        pre = _run(self.layers[:-1], x, self.params)
        return T.tanh(T.add(pre, T.atanh(T.scale(x, SKIP_SHRINK))))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def build_generator(base_width: int = 8, n_res_blocks: int = 2, seed: int = 0,
                    input_skip: bool = False) -> GeneratorNet:
    if base_width < 4:
        raise ValueError(f"base_width must be >= 4, got {base_width}")
    if n_res_blocks < 1:
        raise ValueError(f"n_res_blocks must be >= 1, got {n_res_blocks}")
    w = base_width
    init = _ParamInit(seed)
    relu = Layer("act", act="relu")
    norm = Layer("norm")
    layers: list[Layer] = []

    init.conv("stem", (w, 3, 7, 7), w)
    layers += [Layer("conv", "stem", padding=3), norm, relu]
    for i, (cin, cout) in enumerate([(w, 2 * w), (2 * w, 4 * w)], start=1):
        init.conv(f"down{i}", (cout, cin, 3, 3), cout)
        layers += [Layer("conv", f"down{i}", stride=2, padding=1), norm, relu]
    for i in range(n_res_blocks):
        init.conv(f"res{i}.conv1", (4 * w, 4 * w, 3, 3), 4 * w)
        init.conv(f"res{i}.conv2", (4 * w, 4 * w, 3, 3), 4 * w)
        body = (Layer("conv", f"res{i}.conv1", padding=1), norm, relu,
                Layer("conv", f"res{i}.conv2", padding=1), norm)
        layers.append(Layer("res", f"res{i}", body=body))
    for i, (cin, cout) in enumerate([(4 * w, 2 * w), (2 * w, w)], start=1):
        init.conv(f"up{i}", (cin, cout, 3, 3), cout)
        layers += [Layer("conv_t", f"up{i}", stride=2, padding=1), norm, relu]
    init.conv("out", (3, w, 7, 7), 3)
    if input_skip:
        # start as the identity map
        init.params["out.w"].data[...] = 0.0
    layers += [Layer("conv", "out", padding=3), Layer("act", act="tanh")]
    return GeneratorNet(layers, init.params, base_width, n_res_blocks, input_skip=input_skip)


@dataclass
class DiscriminatorNet:
    layers: list[Layer]
    params: dict[str, Tensor]
    n_threads: int
    kind: str
    depth: int
    widths: list[int] = field(default_factory=list)

    def output_size(self, size: int) -> int:
        for _ in range(self.depth):
            size = (size + 2 - 4) // 2 + 1
        return size  # 3x3 head keeps size

    def forward_threads(self, batch: Tensor) -> list[Tensor]:
        """Raw logit maps, one [N,1,h',w'] tensor per thread."""
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise T.ShapeError(f"discriminator expects [N,3,h,w], got {batch.shape}")
        size = min(batch.shape[2], batch.shape[3])
        # the last normalised block needs at least a 2x2 map
        if size < 2 ** (self.depth + 1):
            raise T.ShapeError(
                f"spatial underflow: {self.kind} discriminator of depth {self.depth} "
                f"cannot score {batch.shape[2]}x{batch.shape[3]} inputs")
        x = batch if self.n_threads == 1 else T.concat([batch] * self.n_threads, axis=1)
        x = _run(self.layers, x, self.params)
        if self.n_threads == 1:
            return [x]
        return [x[:, t:t + 1] for t in range(self.n_threads)]

    __call__ = forward_threads

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def thread_slice(self, name: str, thread: int) -> slice:
        """Rows of parameter ``name`` (weight dim 0 / bias) owned by ``thread``."""
        rows = self.params[name].shape[0] // self.n_threads
        return slice(thread * rows, (thread + 1) * rows)


def build_discriminator(kind: str = "global", n_threads: int = 1, base_width: int = 16,
                        depth: int | None = None, seed: int = 0,
                        input_size: int | None = None) -> DiscriminatorNet:
    """PatchGAN stack: ``depth`` stride-2 4x4 blocks then a 3x3 head per thread."""
    if kind not in DEFAULT_DEPTH:
        raise ValueError(f"unknown discriminator kind {kind!r}")
    if n_threads < 1:
        raise ValueError("n_threads must be >= 1")
    if base_width % n_threads:
        raise ValueError(f"base_width {base_width} not divisible by n_threads {n_threads}")
    depth = DEFAULT_DEPTH[kind] if depth is None else depth
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    if input_size is not None and input_size < 2 ** (depth + 1):
        raise ValueError(f"depth {depth} too large for {input_size}x{input_size} inputs")

    g = n_threads
    init = _ParamInit(seed)
    lrelu = Layer("act", act="leaky_relu", slope=0.2)
    layers: list[Layer] = []
    widths = [base_width * min(2 ** i, 8) for i in range(depth)]
    cin = 3 * g
    for i, cout in enumerate(widths):
        name = f"block{i}"
        init.conv(name, (cout, cin // g, 4, 4), cout)
        layers.append(Layer("conv", name, stride=2, padding=1, groups=g))
        if i > 0:
            layers.append(Layer("norm"))
        layers.append(lrelu)
        cin = cout
    init.conv("head", (g, cin // g, 3, 3), g)
    layers.append(Layer("conv", "head", padding=1, groups=g))
    return DiscriminatorNet(layers, init.params, n_threads, kind, depth, widths)
