"""Model zoo: the five segmentation families behind one config surface.

Every model maps (N, 1, H, W) grayscale input to (N, 1, H, W) foreground
probabilities through a 1x1 convolution and a sigmoid. Builds are pure given
(config, seed): weights come from a seeded fan-in variance-scaling normal
initializer, so the same config always yields bit-identical parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .backbones import make_backbone
from .blocks import ASPP, RRCU, AttentionGate, DoubleConv, ResidualUnit, SqueezeExcitation, Stem
from .errors import BadInputSize, ConfigMismatch, InvalidBackbone, IoFailure

FAMILIES = ("unet", "attention_unet", "resunet", "resunetpp", "r2unet")
BACKBONES = ("none", "vgg19", "resnet152", "densenet201")
BACKBONE_FAMILIES = ("unet", "attention_unet")
SIDECAR_SUFFIX = ".json"


@dataclass
class ArchConfig:
    """Architecture descriptor; every knob a build needs, nothing more."""

    family: str
    backbone: str = "none"
    depth: int = 4
    base_width: int = 16
    input_size: tuple[int, int] = (64, 64)
    recurrence_steps: int = 2  # t, r2unet only
    se_ratio: int = 8
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    batch_norm: bool | None = None  # None = family default
    gate_from_encoder: bool = False  # alternate attention wiring
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}, expected one of {BACKBONES}")
        if self.backbone != "none" and self.family not in BACKBONE_FAMILIES:
            raise InvalidBackbone(
                f"backbone {self.backbone!r} only applies to {BACKBONE_FAMILIES}, not {self.family!r}"
            )
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.backbone != "none" and self.depth > 4:
            raise ValueError(f"backbone trunks define at most depth 4, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.recurrence_steps < 1:
            raise ValueError(f"recurrence_steps must be >= 1, got {self.recurrence_steps}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise BadInputSize(f"input_size must be two positive ints, got {self.input_size}")
        factor = 2 ** self.depth
        if any(side % factor for side in self.input_size):
            raise BadInputSize(
                f"input size {self.input_size} must be divisible by {factor} (depth {self.depth})"
            )

    @property
    def uses_batch_norm(self) -> bool:
        if self.batch_norm is not None:
            return self.batch_norm
        return self.family not in ("unet", "attention_unet")

    @property
    def display_name(self) -> str:
        if self.backbone == "none":
            return self.family
        return f"{self.family}-{self.backbone}"


class UNet(nn.Module):
    """Plain or attention-gated U-Net, optionally on a backbone trunk."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        bn = cfg.uses_batch_norm
        self.depth = cfg.depth
        self.attention = cfg.family == "attention_unet"
        self.gate_from_encoder = cfg.gate_from_encoder
        if cfg.backbone == "none":
            widths = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
            self.trunk = None
            self.enc = nn.ModuleList()
            cin = 1
            for width in widths:
                self.enc.append(DoubleConv(cin, width, bn))
                cin = width
            self.pool = nn.MaxPool2d(2)
            self.bottleneck = DoubleConv(widths[-1], widths[-1] * 2, bn)
            bottom = widths[-1] * 2
        else:
            self.trunk = make_backbone(cfg.backbone, cfg.depth, cfg.base_width)
            widths = list(self.trunk.skip_channels)
            bottom = self.trunk.out_channels
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.gates = nn.ModuleList()
        cur = bottom
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(cur, width, 2, stride=2))
            self.dec.append(DoubleConv(2 * width, width, bn))
            if self.attention:
                self.gates.append(AttentionGate(cur, width))
            cur = width
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        if self.trunk is None:
            skips = []
            for block in self.enc:
                x = block(x)
                skips.append(x)
                x = self.pool(x)
            x = self.bottleneck(x)
        else:
            skips, x = self.trunk(x)
        # Encoder feature one level deeper than each skip (caption wiring).
        deeper = skips[1:] + [x]
        for step, (up, dec) in enumerate(zip(self.ups, self.dec)):
            level = self.depth - 1 - step
            skip = skips[level]
            if self.attention:
                gate = deeper[level] if self.gate_from_encoder else x
                skip = self.gates[step](gate, skip)
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


class ResUNet(nn.Module):
    """U-Net shape built from pre-activation residual units; strided encoder."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        bn = cfg.uses_batch_norm
        self.depth = cfg.depth
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
        self.enc = nn.ModuleList([ResidualUnit(1, widths[0], 1, bn)])
        for i in range(1, cfg.depth):
            self.enc.append(ResidualUnit(widths[i - 1], widths[i], 2, bn))
        self.bridge = ResidualUnit(widths[-1], widths[-1] * 2, 2, bn)
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        cur = widths[-1] * 2
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(cur, width, 2, stride=2))
            self.dec.append(ResidualUnit(2 * width, width, 1, bn))
            cur = width
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for unit in self.enc:
            x = unit(x)
            skips.append(x)
        x = self.bridge(x)
        for up, dec, skip in zip(self.ups, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


class ResUNetPP(nn.Module):
    """Residual encoder with SE recalibration, ASPP bridge and gated decoder."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        bn = cfg.uses_batch_norm
        self.depth = cfg.depth
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
        self.stem = Stem(1, widths[0], 2, bn)
        self.se = nn.ModuleList(
            SqueezeExcitation(widths[i], cfg.se_ratio) for i in range(cfg.depth - 1)
        )
        self.enc = nn.ModuleList(
            ResidualUnit(widths[i], widths[i + 1], 2, bn) for i in range(cfg.depth - 1)
        )
        self.bridge = ASPP(widths[cfg.depth - 1], widths[cfg.depth], cfg.aspp_rates)
        self.gates = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        cur = widths[cfg.depth]
        for level in range(cfg.depth - 2, -1, -1):
            skip_width = widths[level]
            self.gates.append(AttentionGate(cur, skip_width))
            self.ups.append(nn.ConvTranspose2d(cur, 2 * skip_width, 2, stride=2))
            self.dec.append(ResidualUnit(3 * skip_width, 2 * skip_width, 1, bn))
            cur = 2 * skip_width
        self.final_up = nn.ConvTranspose2d(cur, widths[0], 2, stride=2)
        self.final_aspp = ASPP(widths[0], widths[0], cfg.aspp_rates)
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        x = self.stem(x)
        skips = [x]
        for se, enc in zip(self.se, self.enc):
            x = enc(se(x))
            skips.append(x)
        x = self.bridge(x)
        for gate, up, dec, skip in zip(self.gates, self.ups, self.dec, reversed(skips[:-1])):
            gated = gate(x, skip)
            x = up(x)
            x = dec(torch.cat([x, gated], dim=1))
        x = self.final_up(x)
        x = self.final_aspp(x)
        return torch.sigmoid(self.head(x))


class R2UNet(nn.Module):
    """U-Net shape built from recurrent residual conv units."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        bn = cfg.uses_batch_norm
        t = cfg.recurrence_steps
        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth)]
        self.enc = nn.ModuleList()
        cin = 1
        for width in widths:
            self.enc.append(RRCU(cin, width, t, 1, bn))
            cin = width
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = RRCU(widths[-1], widths[-1] * 2, t, 1, bn)
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        cur = widths[-1] * 2
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(cur, width, 2, stride=2))
            self.dec.append(RRCU(2 * width, width, t, 1, bn))
            cur = width
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))


_FAMILY_BUILDERS = {
    "unet": UNet,
    "attention_unet": UNet,
    "resunet": ResUNet,
    "resunetpp": ResUNetPP,
    "r2unet": R2UNet,
}


def _init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded fan-in variance-scaling normal init; zero biases, unit BN.

    Unit gain (std = sqrt(1/fan_in)) rather than the ReLU gain of 2: the
    residual and recurrent sums would otherwise grow activations
    exponentially with depth and saturate the sigmoid head before any batch
    statistics exist.
    """
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = module.weight
            if isinstance(module, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3]
            elif isinstance(module, nn.Conv2d):
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            else:
                fan_in = w.shape[1]
            with torch.no_grad():
                w.normal_(0.0, math.sqrt(1.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_model(cfg: ArchConfig) -> nn.Module:
    """Construct and seed a model; attaches the config as ``model.config``."""
    cfg.validate()
    # fork_rng keeps module construction (which consumes the global RNG)
    # deterministic without disturbing the caller's RNG state.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = _FAMILY_BUILDERS[cfg.family](cfg)
    _init_parameters(model, cfg.seed)
    model.config = cfg
    return model


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _sidecar_path(path) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def save_model(model: nn.Module, path, epoch=None, val_miou=None) -> Path:
    """Write the parameter blob plus a JSON sidecar describing the build."""
    path = Path(path)
    cfg: ArchConfig = model.config
    sidecar = {
        "family": cfg.family,
        "backbone": cfg.backbone,
        "depth": cfg.depth,
        "base_width": cfg.base_width,
        "input_size": list(cfg.input_size),
        "t": cfg.recurrence_steps,
        "seed": cfg.seed,
        "epoch": epoch,
        "val_miou": val_miou,
        "se_ratio": cfg.se_ratio,
        "aspp_rates": list(cfg.aspp_rates),
        "batch_norm": cfg.batch_norm,
        "gate_from_encoder": cfg.gate_from_encoder,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), path)
        _sidecar_path(path).write_text(
            json.dumps(sidecar, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_sidecar(path) -> dict:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise ConfigMismatch(f"checkpoint sidecar missing: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if not isinstance(meta, dict):
            raise ConfigMismatch(f"sidecar {sidecar} is not a JSON object")
        return meta
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigMismatch(f"unreadable sidecar {sidecar}: {exc}") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read sidecar {sidecar}: {exc}") from exc


def load_model(path, family=None) -> nn.Module:
    """Rebuild a model from its sidecar and restore parameters bit-exactly."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such checkpoint: {path}")
    meta = read_sidecar(path)
    try:
        cfg = ArchConfig(
            family=meta["family"],
            backbone=meta["backbone"],
            depth=int(meta["depth"]),
            base_width=int(meta["base_width"]),
            input_size=tuple(meta["input_size"]),
            recurrence_steps=int(meta["t"]),
            seed=int(meta["seed"]),
            se_ratio=int(meta.get("se_ratio", 8)),
            aspp_rates=tuple(meta.get("aspp_rates", (1, 2, 4))),
            batch_norm=meta.get("batch_norm"),
            gate_from_encoder=bool(meta.get("gate_from_encoder", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigMismatch(f"sidecar for {path} is incomplete or invalid: {exc}") from exc
    if family is not None and cfg.family != family:
        raise ConfigMismatch(f"checkpoint holds {cfg.family!r}, expected {family!r}")
    model = build_model(cfg)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except (RuntimeError, KeyError, ValueError) as exc:
        raise ConfigMismatch(f"checkpoint {path} does not match its sidecar: {exc}") from exc
    model.checkpoint_meta = meta
    return model


def table_configs(base_width=16, input_size=(64, 64), seed=0) -> list[tuple[str, ArchConfig]]:
    """The nine benchmarked variants in report order."""
    configs = []
    for family in ("unet", "attention_unet"):
        for backbone in ("vgg19", "resnet152", "densenet201"):
            cfg = ArchConfig(
                family=family,
                backbone=backbone,
                base_width=base_width,
                input_size=input_size,
                seed=seed,
            )
            configs.append((cfg.display_name, cfg))
    for family in ("resunet", "resunetpp", "r2unet"):
        cfg = ArchConfig(
            family=family, base_width=base_width, input_size=input_size, seed=seed
        )
        configs.append((cfg.display_name, cfg))
    return configs
