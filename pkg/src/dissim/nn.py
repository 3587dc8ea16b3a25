"""CIFAR-style ResNets with named pre-ReLU tap points, plus SGD and the LR schedule.

Taps sit after each residual addition and before the following ReLU, the one
spot per residual unit that no skip connection bypasses. They are numbered
1..k in depth order, so "layer 8" of a ResNet34 is its 8th residual unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .repsim import Representation
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    block_depths: tuple[int, int, int, int]
    block_channels: tuple[int, int, int, int]
    bottleneck: bool = False
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def validate(self) -> None:
        if len(self.block_depths) != 4 or len(self.block_channels) != 4:
            raise ValueError("block_depths and block_channels must have 4 entries")
        if any(d < 1 for d in self.block_depths) or any(c < 1 for c in self.block_channels):
            raise ValueError("block depths and channels must be positive")
        if self.bottleneck and any(c % 4 for c in self.block_channels):
            raise ValueError("bottleneck channels must be divisible by 4")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        c, h, w = self.input_shape
        if c < 1 or h < 8 or w < 8:
            raise ValueError("input_shape must be (C, H>=8, W>=8)")


PRESETS: dict[str, ModelConfig] = {
    "resnet18": ModelConfig((2, 2, 2, 2), (64, 128, 256, 512), bottleneck=False),
    "resnet34": ModelConfig((3, 4, 6, 3), (64, 128, 256, 512), bottleneck=False),
    "resnet101": ModelConfig((3, 4, 23, 3), (256, 512, 1024, 2048), bottleneck=True),
    # desk-scale preset: same depth pattern as resnet18, a quarter of the width
    "resnet-s": ModelConfig((2, 2, 2, 2), (16, 32, 64, 128), bottleneck=False),
}


@dataclass(frozen=True)
class TapPoint:
    id: int
    channels: int
    spatial: tuple[int, int]
    block_index: int  # which of the 4 stages this residual unit sits in


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0):
        self.weight = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)

    def params(self):
        return {"weight": self.weight}


class BatchNorm2d:
    eps = 1e-5
    momentum = 0.1

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = x.shape[1]
        if training:
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            n = x.size // c
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean += self.momentum * (mu.astype(np.float32) - self.running_mean)
            self.running_var += self.momentum * (unbiased.astype(np.float32) - self.running_var)
            return out
        mu = Tensor(self.running_mean.reshape(1, c, 1, 1).astype(x.dtype.type))
        sd = Tensor(np.sqrt(self.running_var + self.eps).reshape(1, c, 1, 1).astype(x.dtype.type))
        xhat = (x - mu) / sd
        g = T.reshape(self.gamma, (1, c, 1, 1))
        b = T.reshape(self.beta, (1, c, 1, 1))
        return g * xhat + b

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Linear:
    def __init__(self, rng, cin, cout):
        self.weight = Tensor(_kaiming(rng, (cin, cout), cin), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class BasicBlock:
    def __init__(self, rng, cin, cout, stride):
        self.conv1 = Conv2d(rng, cin, cout, 3, stride, 1)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1, 1)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = (Conv2d(rng, cin, cout, 1, stride, 0), BatchNorm2d(cout))

    def pre_activation(self, x: Tensor, training: bool) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x), training))
        out = self.bn2(self.conv2(out), training)
        if self.shortcut is not None:
            conv, bn = self.shortcut
            x = bn(conv(x), training)
        return out + x

    def modules(self):
        mods = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.shortcut is not None:
            mods["shortcut_conv"], mods["shortcut_bn"] = self.shortcut
        return mods


class BottleneckBlock:
    """1x1 reduce, 3x3, 1x1 expand; cout is the expanded width (4x the inner)."""

    def __init__(self, rng, cin, cout, stride):
        width = cout // 4
        self.conv1 = Conv2d(rng, cin, width, 1, 1, 0)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(rng, width, width, 3, stride, 1)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(rng, width, cout, 1, 1, 0)
        self.bn3 = BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = (Conv2d(rng, cin, cout, 1, stride, 0), BatchNorm2d(cout))

    def pre_activation(self, x: Tensor, training: bool) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x), training))
        out = T.relu(self.bn2(self.conv2(out), training))
        out = self.bn3(self.conv3(out), training)
        if self.shortcut is not None:
            conv, bn = self.shortcut
            x = bn(conv(x), training)
        return out + x

    def modules(self):
        mods = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2,
                "bn2": self.bn2, "conv3": self.conv3, "bn3": self.bn3}
        if self.shortcut is not None:
            mods["shortcut_conv"], mods["shortcut_bn"] = self.shortcut
        return mods


class Model:
    """An ordered stack of residual stages with enumerable tap points."""

    def __init__(self, config: ModelConfig, seed: int, name: str | None = None):
        config.validate()
        self.config = config
        self.seed = seed
        self.name = name or f"model-seed{seed}"
        self.meta: dict | None = None
        rng = np.random.default_rng(seed)

        stem_out = config.block_channels[0] // 4 if config.bottleneck else config.block_channels[0]
        cin_img = config.input_shape[0]
        self.stem_conv = Conv2d(rng, cin_img, stem_out, 3, 1, 1)
        self.stem_bn = BatchNorm2d(stem_out)

        block_cls = BottleneckBlock if config.bottleneck else BasicBlock
        self.stages: list[list] = []
        cin = stem_out
        h, w = config.input_shape[1], config.input_shape[2]
        self.taps: list[TapPoint] = []
        tap_id = 1
        for stage_idx, (depth, cout) in enumerate(zip(config.block_depths, config.block_channels)):
            stage = []
            for block_idx in range(depth):
                stride = 2 if (stage_idx > 0 and block_idx == 0) else 1
                if stride == 2:
                    h, w = h // 2, w // 2
                stage.append(block_cls(rng, cin, cout, stride))
                cin = cout
                self.taps.append(TapPoint(tap_id, cout, (h, w), stage_idx))
                tap_id += 1
            self.stages.append(stage)
        self.fc = Linear(rng, cin, config.num_classes)

    def tap_ids(self) -> list[int]:
        return [t.id for t in self.taps]

    def forward_with_taps(self, x: Tensor, tap_ids=(), training: bool = False):
        """Run the network; capture the pre-ReLU representation at each requested tap."""
        wanted = set(tap_ids)
        known = set(self.tap_ids())
        unknown = wanted - known
        if unknown:
            raise KeyError(f"unknown tap ids {sorted(unknown)}; model has taps {sorted(known)}")
        reps: dict[int, Representation] = {}
        out = T.relu(self.stem_bn(self.stem_conv(x), training))
        tap = 1
        for stage in self.stages:
            for block in stage:
                pre = block.pre_activation(out, training)
                if tap in wanted:
                    reps[tap] = Representation(values=pre, tap_id=tap, model_id=self.name)
                out = T.relu(pre)
                tap += 1
        out = T.global_avg_pool(out)
        logits = self.fc(out)
        return logits, reps

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        logits, _ = self.forward_with_taps(x, (), training)
        return logits

    def _named_modules(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                for mname, mod in block.modules().items():
                    yield f"stage{si}.block{bi}.{mname}", mod
        yield "fc", self.fc

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in self._named_modules():
            for pname, p in mod.params().items():
                out[f"{prefix}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self._named_modules():
            if isinstance(mod, BatchNorm2d):
                for bname, b in mod.buffers().items():
                    out[f"{prefix}.{bname}"] = b
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, bname = name.rsplit(".", 1)
        for p, mod in self._named_modules():
            if p == prefix:
                getattr(mod, bname)[...] = value
                return
        raise KeyError(name)


def build_model(cfg: ModelConfig | str, seed: int, name: str | None = None) -> Model:
    if isinstance(cfg, str):
        try:
            cfg = PRESETS[cfg]
        except KeyError:
            raise ValueError(f"unknown model preset {cfg!r}; choices: {sorted(PRESETS)}") from None
    return Model(cfg, seed, name=name)


def forward_with_taps(model: Model, batch: Tensor, tap_ids, training: bool = False):
    return model.forward_with_taps(batch, tap_ids, training)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class ShapeMismatch(ValueError):
    pass


class SGD:
    """Nesterov-momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 nesterov: bool = True, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self._buf: dict[str, np.ndarray] = {}

    def step(self, grads, lr: float) -> None:
        for name, p in self.params.items():
            g = grads[p]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self._buf.get(name)
                if buf is None:
                    buf = np.zeros_like(p.data)
                    self._buf[name] = buf
                buf *= self.momentum
                buf += g
                update = g + self.momentum * buf if self.nesterov else buf
            else:
                update = g
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)
