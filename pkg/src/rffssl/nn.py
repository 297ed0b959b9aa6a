"""Residual 1-D CNN for I/Q records, losses, Adam and checkpoints.

Network layout::

    stem: conv(2 -> stem_kernels, size 7, stride 2) + BN + ReLU
    conv block                      (identity shortcut, 2 separable convs)
    [downsampling block, conv block] * (num_conv_blocks - 1)
    global average pooling -> dense -> softmax

A separable convolution is a depthwise size-3 convolution followed by a
pointwise 1x1 convolution. Downsampling blocks put stride 2 on the main
path and average-pool + 1x1 convolution on the shortcut, doubling the
channel count.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

BN_MOMENTUM = 0.9  # running = 0.9 * running + 0.1 * batch
BN_EPS = 1e-5
PROB_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


class NumericFailure(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} at layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    num_conv_blocks: int = 2
    stem_kernels: int = 64
    stem_size: int = 7
    stem_stride: int = 2
    block_channels: int = 64
    input_len: int = 1024
    input_channels: int = 2

    def __post_init__(self):
        if self.num_conv_blocks < 1:
            raise ValueError("num_conv_blocks must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def widths(self) -> list[int]:
        return [self.block_channels * 2**i for i in range(self.num_conv_blocks)]


def _bn(channels: int) -> nn.BatchNorm1d:
    # torch momentum weights the new batch statistic
    return nn.BatchNorm1d(channels, eps=BN_EPS, momentum=1 - BN_MOMENTUM)


class SeparableConv1d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv1d(cin, cin, 3, stride=stride, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv1d(cin, cout, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class ConvBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = SeparableConv1d(channels, channels)
        self.bn1 = _bn(channels)
        self.conv2 = SeparableConv1d(channels, channels)
        self.bn2 = _bn(channels)

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(x + y)


class DownsampleBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = SeparableConv1d(cin, cout, stride=2)
        self.bn1 = _bn(cout)
        self.conv2 = SeparableConv1d(cout, cout)
        self.bn2 = _bn(cout)
        self.shortcut = nn.Conv1d(cin, cout, 1, bias=False)
        self.bn_shortcut = _bn(cout)

    def forward(self, x: Tensor) -> Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        s = self.bn_shortcut(self.shortcut(F.avg_pool1d(x, 2, 2, ceil_mode=True)))
        return F.relu(s + y)


class Stem(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.conv = nn.Conv1d(
            config.input_channels, config.stem_kernels, config.stem_size,
            stride=config.stem_stride, padding=config.stem_size // 2, bias=False,
        )
        self.bn = _bn(config.stem_kernels)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class Head(nn.Module):
    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.dense = nn.Linear(channels, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        return self.dense(x.mean(dim=-1))


class ResNet1d(nn.Module):
    """Returns logits; use :func:`forward` for probabilities."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.widths()
        layers: list[nn.Module] = [Stem(config)]
        if config.stem_kernels != widths[0]:
            layers.append(nn.Sequential(nn.Conv1d(config.stem_kernels, widths[0], 1, bias=False), _bn(widths[0]), nn.ReLU()))
        layers.append(ConvBlock(widths[0]))
        for cin, cout in zip(widths, widths[1:]):
            layers.append(DownsampleBlock(cin, cout))
            layers.append(ConvBlock(cout))
        layers.append(Head(widths[-1], config.num_classes))
        self.layers = nn.ModuleList(layers)
        self.check_finite = True

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.check_finite and not torch.isfinite(x).all():
                raise NumericFailure("non-finite activation", i)
        return x


def _init_weights(model: nn.Module, generator: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm1d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ResNet1d:
    """He-initialized network; BN scale 1, shift 0."""
    model = ResNet1d(config).to(dtype)
    gen = torch.Generator().manual_seed(int(seed) % 2**63)
    _init_weights(model, gen)
    if isinstance(model.layers[-1], Head):
        # a small head keeps the initial prediction close to uniform
        with torch.no_grad():
            model.layers[-1].dense.weight.mul_(0.1)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_tensor(signals: np.ndarray, dtype: torch.dtype = torch.float32) -> Tensor:
    """Complex records (batch, length) -> real tensor (batch, 2, length)."""
    signals = np.asarray(signals)
    x = np.stack([signals.real, signals.imag], axis=1)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def logits(model: ResNet1d, batch: Tensor | np.ndarray, mode: str = "infer") -> Tensor:
    if not isinstance(batch, Tensor):
        batch = to_tensor(batch, next(model.parameters()).dtype)
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    model.train(mode == "train")
    return model(batch)


def forward(model: ResNet1d, batch: Tensor | np.ndarray, mode: str = "infer") -> Tensor:
    """Class probabilities, shape (batch, num_classes).

    ``train`` normalizes with batch statistics and updates running
    statistics; ``infer`` uses the running statistics and no autograd graph.
    """
    if mode == "infer":
        with torch.no_grad():
            return torch.softmax(logits(model, batch, mode), dim=-1)
    return torch.softmax(logits(model, batch, mode), dim=-1)


def predict(model: ResNet1d, signals: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward(model, signals[i : i + batch_size]).numpy() for i in range(0, len(signals), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def _target_index(target, num_classes: int) -> Tensor:
    target = torch.as_tensor(np.asarray(target) if not isinstance(target, Tensor) else target)
    if target.ndim == 2:
        target = target.argmax(dim=-1)
    return target.long()


def cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean ``-log p[target]`` over rows of a probability matrix.

    ``target`` holds class indices or one-hot rows.
    """
    idx = _target_index(target, pred.shape[-1])
    picked = pred.gather(-1, idx.view(-1, 1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def cross_entropy_logits(z: Tensor, target) -> Tensor:
    """Same value as ``cross_entropy(softmax(z), target)`` computed stably."""
    return F.cross_entropy(z, _target_index(target, z.shape[-1]))


def backward(model: ResNet1d, batch: Tensor | np.ndarray, targets, mode: str = "train") -> dict[str, Tensor]:
    """Gradient of the mean cross-entropy w.r.t. every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = cross_entropy_logits(logits(model, batch, mode), targets)
    if not torch.isfinite(loss):
        raise NumericFailure("non-finite loss")
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


@dataclass
class OptimizerState:
    optimizer: torch.optim.Adam

    @property
    def step(self) -> int:
        steps = [s["step"] for s in self.optimizer.state.values() if "step" in s]
        return int(max(steps)) if steps else 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def make_optimizer(model: nn.Module, lr: float) -> OptimizerState:
    return OptimizerState(torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS))


def adam_step(
    model: nn.Module, grads: dict[str, Tensor] | None, state: OptimizerState, lr: float | None = None
) -> OptimizerState:
    """One bias-corrected Adam update.

    ``grads`` maps parameter names to gradients; ``None`` uses the
    gradients already accumulated on the parameters.
    """
    if lr is not None:
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    if grads is not None:
        for name, p in model.named_parameters():
            p.grad = grads[name].to(p.dtype).clone()
    state.optimizer.step()
    return state


# checkpoint: u32 version, u32 tensor count, then per tensor
# u16 name length, name (utf-8), u8 ndim, u32 dims, float32 values
def save_checkpoint(model: ResNet1d, path: str | Path) -> None:
    tensors = model.state_dict()
    tensors = {k: v for k, v in tensors.items() if v.dtype.is_floating_point}
    with open(path, "wb") as f:
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, value in tensors.items():
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)) + encoded)
            f.write(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(value.detach().cpu().numpy().astype("<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"version": CHECKPOINT_VERSION, "model": asdict(model.config)}, indent=2))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> ResNet1d:
    if config is None:
        meta = json.loads(Path(str(path) + ".json").read_text())
        config = ModelConfig(**meta["model"])
    raw = Path(path).read_bytes()
    version, count = struct.unpack_from("<II", raw, 0)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2 : pos + 2 + n].decode()
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = torch.from_numpy(values.copy())
    if pos != len(raw):
        raise ValueError(f"{len(raw) - pos} trailing bytes in checkpoint")
    model = build_model(config)
    model.load_state_dict(tensors, strict=False)
    missing = set(model.state_dict()) - set(tensors) - {k for k, v in model.state_dict().items() if not v.dtype.is_floating_point}
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)}")
    return model
