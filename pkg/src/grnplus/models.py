"""U-Net segmentor and ResNet-style generator built on the diffcore primitives."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from torch import nn

from . import diffcore as dc
from . import tensorfile


class ModelConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class SegmentorConfig:
    in_channels: int = 1
    n_classes: int = 7
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    kernel_size: int = 3
    norm: str = "instance"

    def validate(self) -> None:
        ch = self.encoder_channels
        if len(ch) < 1 or any(b <= a for a, b in zip(ch, ch[1:])) or ch[0] < 1:
            raise ModelConfigError(f"encoder_channels must be positive and strictly increasing, got {ch}")
        if self.n_classes < 2:
            raise ModelConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        _check_common(self)

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.encoder_channels) - 1)


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    stem_channels: int = 50
    n_down: int = 2
    n_res_blocks: int = 4
    kernel_size: int = 3
    norm: str = "instance"
    output_activation: str = "sigmoid"

    def validate(self) -> None:
        if self.n_down < 1 or self.n_res_blocks < 1 or self.stem_channels < 1:
            raise ModelConfigError(f"need n_down >= 1, n_res_blocks >= 1, stem_channels >= 1; got {self}")
        if self.output_activation != "sigmoid":
            raise ModelConfigError(f"unsupported output activation {self.output_activation!r}")
        _check_common(self)

    @property
    def multiple(self) -> int:
        return 2**self.n_down


def _check_common(cfg) -> None:
    if cfg.kernel_size < 1 or cfg.kernel_size % 2 == 0:
        raise ModelConfigError(f"kernel_size must be odd, got {cfg.kernel_size}")
    if cfg.norm not in ("instance", "batch"):
        raise ModelConfigError(f"norm must be 'instance' or 'batch', got {cfg.norm!r}")


def config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["kind"] = type(cfg).__name__
    return d


def config_from_dict(d: Mapping) -> SegmentorConfig | GeneratorConfig:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = {"SegmentorConfig": SegmentorConfig, "GeneratorConfig": GeneratorConfig}.get(kind)
    if cls is None:
        raise ModelConfigError(f"unknown model config kind {kind!r}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ModelConfigError(f"unknown {kind} keys: {sorted(unknown)}")
    if "encoder_channels" in d:
        d["encoder_channels"] = tuple(d["encoder_channels"])
    return cls(**d)


# ---------------------------------------------------------------------------
# layers


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int | None = None, normed: bool = False):
        super().__init__()
        self.normed = normed
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.fan_in = c_in * k * k

    def forward(self, x):
        return dc.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvUp(nn.Module):
    """Stride-2 transposed convolution that exactly doubles H and W."""

    def __init__(self, c_in: int, c_out: int, k: int, normed: bool = False):
        super().__init__()
        self.normed = normed
        self.weight = nn.Parameter(torch.empty(c_in, c_out, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.pad = (k - 1) // 2
        self.output_pad = 2 - k + 2 * self.pad
        self.fan_in = c_in * k * k // 4 or 1

    def forward(self, x):
        return dc.conv_transpose2d(x, self.weight, self.bias, 2, self.pad, self.output_pad)


class Norm(nn.Module):
    def __init__(self, c: int, kind: str):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(c))
        self.shift = nn.Parameter(torch.zeros(c))
        self.kind = kind

    def forward(self, x):
        fn = dc.instance_norm if self.kind == "instance" else dc.batch_norm
        return fn(x, self.scale, self.shift)


class ConvNormRelu(nn.Module):
    def __init__(self, c_in, c_out, k, norm, stride=1):
        super().__init__()
        self.conv = Conv(c_in, c_out, k, stride, normed=True)
        self.norm = Norm(c_out, norm)

    def forward(self, x):
        return dc.relu(self.norm(self.conv(x)))


class DoubleConv(nn.Module):
    def __init__(self, c_in, c_out, k, norm):
        super().__init__()
        self.a = ConvNormRelu(c_in, c_out, k, norm)
        self.b = ConvNormRelu(c_out, c_out, k, norm)

    def forward(self, x):
        return self.b(self.a(x))


class ResidualDown(nn.Module):
    """conv(stride 2)-norm-relu-conv-norm plus a strided 1x1 projection shortcut."""

    def __init__(self, c_in, c_out, k, norm):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, k, stride=2, normed=True)
        self.norm1 = Norm(c_out, norm)
        self.conv2 = Conv(c_out, c_out, k, normed=True)
        self.norm2 = Norm(c_out, norm)
        self.proj = Conv(c_in, c_out, 1, stride=2, pad=0, normed=True)
        self.proj_norm = Norm(c_out, norm)

    def forward(self, x):
        h = self.norm2(self.conv2(dc.relu(self.norm1(self.conv1(x)))))
        return dc.relu(dc.add(h, self.proj_norm(self.proj(x))))


class ResidualBlock(nn.Module):
    def __init__(self, c, k, norm):
        super().__init__()
        self.conv1 = Conv(c, c, k, normed=True)
        self.norm1 = Norm(c, norm)
        self.conv2 = Conv(c, c, k, normed=True)
        self.norm2 = Norm(c, norm)

    def forward(self, x):
        h = self.norm2(self.conv2(dc.relu(self.norm1(self.conv1(x)))))
        return dc.relu(dc.add(x, h))


class UpStage(nn.Module):
    def __init__(self, c_in, c_out, k, norm):
        super().__init__()
        self.up = ConvUp(c_in, c_out, k, normed=True)
        self.norm = Norm(c_out, norm)

    def forward(self, x):
        return dc.relu(self.norm(self.up(x)))


# ---------------------------------------------------------------------------
# backbones


class Backbone(nn.Module):
    config: SegmentorConfig | GeneratorConfig

    def named_params(self) -> dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def architecture_table(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, tuple(p.shape), p.numel()) for name, p in self.named_parameters()]

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise dc.DimensionError(
                f"{type(self).__name__}: expected (N, {self.config.in_channels}, H, W), got {tuple(x.shape)}"
            )
        m = self.config.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ModelConfigError(
                f"{type(self).__name__}: spatial dims {tuple(x.shape[2:])} must be multiples of {m}"
            )
        if self.config.norm == "instance" and (x.shape[2] // m) * (x.shape[3] // m) < 2:
            raise ModelConfigError(
                f"{type(self).__name__}: input {tuple(x.shape[2:])} leaves a single pixel at the deepest level, "
                "where instance normalization is undefined"
            )


class Segmentor(Backbone):
    """U-Net: two conv-norm-relu per level, max-pool down, transposed-conv up, skip concat."""

    def __init__(self, cfg: SegmentorConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        k, norm, ch = cfg.kernel_size, cfg.norm, cfg.encoder_channels
        self.enc = nn.ModuleList()
        c = cfg.in_channels
        for out in ch:
            self.enc.append(DoubleConv(c, out, k, norm))
            c = out
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for out in reversed(ch[:-1]):
            self.up.append(ConvUp(c, out, k))
            self.dec.append(DoubleConv(2 * out, out, k, norm))
            c = out
        self.head = Conv(c, cfg.n_classes, 1, pad=0)

    def forward(self, x):
        self._check_input(x)
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = dc.max_pool2(x)
        for up, block in zip(self.up, self.dec):
            x = block(dc.concat_channels(skips.pop(), up(x)))
        return self.head(x)


class Generator(Backbone):
    """stem conv, strided residual downsampling, residual bottleneck, transposed-conv decoder, sigmoid."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        k, norm = cfg.kernel_size, cfg.norm
        c = cfg.stem_channels
        self.stem = ConvNormRelu(cfg.in_channels, c, k, norm)
        self.down = nn.ModuleList()
        for _ in range(cfg.n_down):
            self.down.append(ResidualDown(c, 2 * c, k, norm))
            c *= 2
        self.res = nn.ModuleList(ResidualBlock(c, k, norm) for _ in range(cfg.n_res_blocks))
        self.ups = nn.ModuleList()
        for _ in range(cfg.n_down):
            self.ups.append(UpStage(c, c // 2, k, norm))
            c //= 2
        self.out = Conv(c, cfg.out_channels, k)

    def forward(self, x):
        self._check_input(x)
        h = self.stem(x)
        for block in self.down:
            h = block(h)
        for block in self.res:
            h = block(h)
        for block in self.ups:
            h = block(h)
        return dc.sigmoid(self.out(h))


INIT_STD = 0.02


def init_parameters(model: nn.Module, generator: torch.Generator, std: float | None = INIT_STD) -> None:
    """Conv weights, zero biases, unit/zero norm affines.

    A conv that feeds a normalization layer is scale-invariant, so under Adam
    its weight norm sets the effective step size; those get N(0, std).
    Heads and un-normalized convs keep Kaiming fan-in scaling, as does
    everything when ``std`` is None.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (Conv, ConvUp)):
                s = std if (module.normed and std is not None) else (2.0 / module.fan_in) ** 0.5
                w = torch.randn(module.weight.shape, generator=generator, dtype=torch.float64) * s
                module.weight.copy_(w)
                module.bias.zero_()
            elif isinstance(module, Norm):
                module.scale.fill_(1.0)
                module.shift.zero_()


def build_segmentor(cfg: SegmentorConfig = SegmentorConfig(), generator: torch.Generator | None = None) -> Segmentor:
    model = Segmentor(cfg)
    init_parameters(model, generator if generator is not None else torch.Generator().manual_seed(0))
    return model


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), generator: torch.Generator | None = None) -> Generator:
    model = Generator(cfg)
    init_parameters(model, generator if generator is not None else torch.Generator().manual_seed(0))
    return model


def build_model(cfg, generator: torch.Generator | None = None) -> Backbone:
    if isinstance(cfg, SegmentorConfig):
        return build_segmentor(cfg, generator)
    if isinstance(cfg, GeneratorConfig):
        return build_generator(cfg, generator)
    raise ModelConfigError(f"not a model config: {cfg!r}")


def param_count(model: nn.Module | None) -> int:
    if model is None:
        return 0
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoints

_CONFIG_ENTRY = "__config__"


def checkpoint_bytes(models: Mapping[str, Backbone]) -> bytes:
    snapshot = {name: config_to_dict(m.config) for name, m in models.items()}
    tensors = {_CONFIG_ENTRY: np.frombuffer(json.dumps(snapshot, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, m in models.items():
        for pname, p in m.named_parameters():
            arr = p.detach().cpu().numpy()
            tensors[f"{name}/{pname}"] = arr.astype("<f8" if arr.dtype == np.float64 else "<f4")
    return tensorfile.encode(tensors)


def save_checkpoint(models: Mapping[str, Backbone], path: str | os.PathLike) -> None:
    """Write ``{"G": generator, "S": segmentor, ...}`` to a GRNT container."""
    data = checkpoint_bytes(models)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | os.PathLike, expected: Mapping[str, SegmentorConfig | GeneratorConfig] | None = None
) -> dict[str, Backbone]:
    """Rebuild the models stored at ``path``.

    With ``expected``, the embedded configs must match it exactly; a mismatch
    is rejected rather than coerced.
    """
    try:
        tensors = tensorfile.read(path)
    except tensorfile.ContainerError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc
    if _CONFIG_ENTRY not in tensors:
        raise CheckpointError(f"{path}: no embedded config snapshot")
    try:
        snapshot = json.loads(tensors.pop(_CONFIG_ENTRY).tobytes().decode("utf-8"))
        configs = {name: config_from_dict(d) for name, d in snapshot.items()}
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config snapshot: {exc}") from exc
    if expected is not None:
        if set(expected) != set(configs):
            raise ConfigMismatchError(f"checkpoint holds models {sorted(configs)}, expected {sorted(expected)}")
        for name, cfg in expected.items():
            if configs[name] != cfg:
                raise ConfigMismatchError(f"model {name!r}: checkpoint config {configs[name]} != expected {cfg}")

    models: dict[str, Backbone] = {}
    for name, cfg in configs.items():
        model = build_model(cfg)
        own = model.named_params()
        prefix = f"{name}/"
        stored = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
        extra = set(stored) - set(own)
        if extra:
            raise CheckpointError(f"{path}: unknown parameter names for {name!r}: {sorted(extra)}")
        missing = set(own) - set(stored)
        if missing:
            raise CheckpointError(f"{path}: missing parameters for {name!r}: {sorted(missing)}")
        dtypes = {v.dtype for v in stored.values()}
        if dtypes == {np.dtype("<f8")}:
            model.double()
        with torch.no_grad():
            for pname, arr in stored.items():
                p = own[pname]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(
                        f"{path}: {name}/{pname} has shape {tuple(arr.shape)}, config implies {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(arr))
        models[name] = model
    leftover = [k for k in tensors if k.split("/", 1)[0] not in configs]
    if leftover:
        raise CheckpointError(f"{path}: entries for unknown models: {leftover}")
    return models
