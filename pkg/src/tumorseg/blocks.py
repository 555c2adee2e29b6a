"""Differentiable building blocks shared by the model families."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ChannelMismatch, EmptyRates, RatioError, SpatialMismatch


def _check_channels(x, expected):
    if x.shape[1] != expected:
        raise ChannelMismatch(f"expected {expected} input channels, got {x.shape[1]}")


class DoubleConv(nn.Module):
    """Two same-padded 3x3 convolutions, each followed by ReLU (BN optional)."""

    def __init__(self, in_channels, out_channels, batch_norm=False):
        super().__init__()
        self.in_channels = in_channels
        layers = [nn.Conv2d(in_channels, out_channels, 3, padding=1)]
        if batch_norm:
            layers.append(nn.BatchNorm2d(out_channels))
        layers.append(nn.ReLU(inplace=True))
        layers.append(nn.Conv2d(out_channels, out_channels, 3, padding=1))
        if batch_norm:
            layers.append(nn.BatchNorm2d(out_channels))
        layers.append(nn.ReLU(inplace=True))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        _check_channels(x, self.in_channels)
        return self.body(x)


class AttentionGate(nn.Module):
    """Additive attention over a skip connection.

    The gate signal g comes from the next-coarser level, so each of its
    spatial dims must be exactly half of the skip map x. The skip is brought
    onto g's grid by a strided 1x1 convolution, the joint activation is
    squashed to one channel, and the sigmoid weights are bilinearly resampled
    back to x's size before multiplying.
    """

    def __init__(self, gate_channels, skip_channels, inter_channels=None):
        super().__init__()
        if inter_channels is None:
            inter_channels = max(skip_channels // 2, 1)
        self.gate_channels = gate_channels
        self.skip_channels = skip_channels
        self.w_gate = nn.Conv2d(gate_channels, inter_channels, 1)
        self.w_skip = nn.Conv2d(skip_channels, inter_channels, 1, stride=2)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def forward(self, g, x):
        _check_channels(g, self.gate_channels)
        _check_channels(x, self.skip_channels)
        if x.shape[2] != 2 * g.shape[2] or x.shape[3] != 2 * g.shape[3]:
            raise SpatialMismatch(
                f"gate {tuple(g.shape[2:])} must be half of skip {tuple(x.shape[2:])}"
            )
        alpha = torch.sigmoid(self.psi(F.relu(self.w_gate(g) + self.w_skip(x))))
        alpha = F.interpolate(alpha, size=x.shape[2:], mode="bilinear", align_corners=False)
        return x * alpha


class ResidualUnit(nn.Module):
    """Pre-activation residual block: H(x) = F(x) + shortcut(x).

    F is (BN -> ReLU -> 3x3 conv) twice; the first conv carries the stride.
    The shortcut is the identity when shapes allow, else a strided 1x1 conv.
    """

    def __init__(self, in_channels, out_channels, stride=1, batch_norm=True):
        super().__init__()
        self.in_channels = in_channels

        def stage(cin, cout, s):
            layers = [nn.BatchNorm2d(cin)] if batch_norm else []
            layers += [nn.ReLU(), nn.Conv2d(cin, cout, 3, stride=s, padding=1)]
            return layers

        self.residual = nn.Sequential(
            *stage(in_channels, out_channels, stride),
            *stage(out_channels, out_channels, 1),
        )
        if stride == 1 and in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x):
        _check_channels(x, self.in_channels)
        return self.residual(x) + self.shortcut(x)


class SqueezeExcitation(nn.Module):
    """Channel recalibration from globally pooled features."""

    def __init__(self, channels, ratio=8):
        super().__init__()
        if channels % ratio:
            raise RatioError(f"ratio {ratio} must divide {channels} channels")
        hidden = channels // ratio
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        _check_channels(x, self.channels)
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None]


class ASPP(nn.Module):
    """Parallel dilated 3x3 convolutions fused by a 1x1 convolution."""

    def __init__(self, in_channels, out_channels, rates=(1, 2, 4)):
        super().__init__()
        rates = tuple(int(r) for r in rates)
        if not rates:
            raise EmptyRates("ASPP needs at least one dilation rate")
        if any(r < 1 for r in rates) or len(set(rates)) != len(rates):
            raise ValueError(f"rates must be distinct positive integers, got {rates}")
        self.in_channels = in_channels
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, 3, padding=r, dilation=r)
            for r in rates
        )
        self.fuse = nn.Conv2d(len(rates) * out_channels, out_channels, 1)

    def forward(self, x):
        _check_channels(x, self.in_channels)
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class RecurrentConvLayer(nn.Module):
    """One conv layer unrolled over its own output.

    o_0 = conv_f(x); o_k = ReLU(bn(conv_f(x) + conv_r(o_{k-1}))) for k=1..t.
    """

    def __init__(self, in_channels, out_channels, steps=2, stride=1, batch_norm=True):
        super().__init__()
        if steps < 1:
            raise ValueError(f"recurrence steps must be >= 1, got {steps}")
        self.steps = steps
        self.conv_f = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.conv_r = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(out_channels) if batch_norm else nn.Identity()

    def forward(self, x):
        feed = self.conv_f(x)
        out = feed
        for _ in range(self.steps):
            out = F.relu(self.bn(feed + self.conv_r(out)))
        return out


class RRCU(nn.Module):
    """Recurrent residual conv unit: two recurrent layers plus a shortcut."""

    def __init__(self, in_channels, out_channels, steps=2, stride=1, batch_norm=True):
        super().__init__()
        self.in_channels = in_channels
        self.rcl1 = RecurrentConvLayer(in_channels, out_channels, steps, stride, batch_norm)
        self.rcl2 = RecurrentConvLayer(out_channels, out_channels, steps, 1, batch_norm)
        if stride == 1 and in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x):
        _check_channels(x, self.in_channels)
        return self.rcl2(self.rcl1(x)) + self.shortcut(x)


class Stem(nn.Module):
    """Input block: conv path plus shortcut, downsampling by default."""

    def __init__(self, in_channels, out_channels, stride=2, batch_norm=True):
        super().__init__()
        self.in_channels = in_channels
        path = [nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)]
        if batch_norm:
            path.append(nn.BatchNorm2d(out_channels))
        path += [nn.ReLU(), nn.Conv2d(out_channels, out_channels, 3, padding=1)]
        self.path = nn.Sequential(*path)
        if stride == 1 and in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x):
        _check_channels(x, self.in_channels)
        return self.path(x) + self.shortcut(x)
