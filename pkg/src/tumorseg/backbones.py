"""Encoder trunks reproducing the published backbone topologies.

Only the layer layout is kept: stage/block counts match the original designs,
widths scale with ``base_width/64``, and everything is randomly initialized
(trained entirely from scratch, no pretrained weights). Stems run at stride 1
so each trunk yields skip maps at strides 1, 2, 4, ... and a bottleneck one
level deeper, which is what the U-Net style decoders expect.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

VGG19_STAGE_CONVS = (2, 2, 4, 4, 4)
VGG19_WIDTHS = (64, 128, 256, 512, 512)
RESNET152_BLOCKS = (3, 8, 36, 3)
RESNET152_PLANES = (64, 128, 256, 512)
DENSENET201_BLOCKS = (6, 12, 48, 32)
DENSENET201_GROWTH = 32


def _scaled(width, base_width):
    return max(1, round(width * base_width / 64))


class Vgg19Encoder(nn.Module):
    """VGG-19 conv stages (2, 2, 4, 4, 4) with max-pooling between stages."""

    def __init__(self, depth=4, base_width=16, in_channels=1):
        super().__init__()
        stages = depth + 1
        widths = [_scaled(w, base_width) for w in VGG19_WIDTHS[:stages]]
        self.stages = nn.ModuleList()
        cin = in_channels
        for n_convs, width in zip(VGG19_STAGE_CONVS[:stages], widths):
            layers = []
            for _ in range(n_convs):
                layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU(inplace=True)]
                cin = width
            self.stages.append(nn.Sequential(*layers))
        self.pool = nn.MaxPool2d(2)
        self.skip_channels = widths[:-1]
        self.out_channels = widths[-1]

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.pool(x)
            x = stage(x)
            feats.append(x)
        return feats[:-1], feats[-1]


class Bottleneck(nn.Module):
    """Standard 1x1 / 3x3 / 1x1 residual bottleneck with expansion 4."""

    expansion = 4

    def __init__(self, in_channels, planes, stride=1):
        super().__init__()
        out = planes * self.expansion
        self.conv1 = nn.Conv2d(in_channels, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out)
        if stride != 1 or in_channels != out:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out),
            )
        else:
            self.downsample = nn.Identity()

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return F.relu(y + self.downsample(x))


class ResNet152Encoder(nn.Module):
    """ResNet-152 bottleneck stages (3, 8, 36, 3); each stage enters at stride 2."""

    def __init__(self, depth=4, base_width=16, in_channels=1):
        super().__init__()
        stem_width = _scaled(64, base_width)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, stem_width, 7, padding=3, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(inplace=True),
        )
        self.layers = nn.ModuleList()
        skip_channels = [stem_width]
        cin = stem_width
        for n_blocks, planes in zip(RESNET152_BLOCKS[:depth], RESNET152_PLANES[:depth]):
            planes = _scaled(planes, base_width)
            blocks = [Bottleneck(cin, planes, stride=2)]
            cin = planes * Bottleneck.expansion
            blocks += [Bottleneck(cin, planes) for _ in range(n_blocks - 1)]
            self.layers.append(nn.Sequential(*blocks))
            skip_channels.append(cin)
        self.skip_channels = skip_channels[:-1]
        self.out_channels = skip_channels[-1]

    def forward(self, x):
        feats = [self.stem(x)]
        for layer in self.layers:
            feats.append(layer(feats[-1]))
        return feats[:-1], feats[-1]


class DenseLayer(nn.Module):
    def __init__(self, in_channels, growth, bn_size=4):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, bn_size * growth, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(bn_size * growth)
        self.conv2 = nn.Conv2d(bn_size * growth, growth, 3, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(F.relu(self.bn1(x)))
        y = self.conv2(F.relu(self.bn2(y)))
        return torch.cat([x, y], dim=1)


class Transition(nn.Module):
    """Dense-block transition: 1x1 compression (0.5) then 2x2 average pool."""

    def __init__(self, in_channels):
        super().__init__()
        self.out_channels = in_channels // 2
        self.bn = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, self.out_channels, 1, bias=False)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        return self.pool(self.conv(F.relu(self.bn(x))))


class DenseNet201Encoder(nn.Module):
    """DenseNet-201 dense blocks (6, 12, 48, 32) with 0.5-compression transitions."""

    def __init__(self, depth=4, base_width=16, in_channels=1):
        super().__init__()
        growth = _scaled(DENSENET201_GROWTH, base_width)
        width = 2 * growth
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, padding=3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(2)
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        skip_channels = [width]
        for i, n_layers in enumerate(DENSENET201_BLOCKS[:depth]):
            if i:
                trans = Transition(width)
                self.transitions.append(trans)
                width = trans.out_channels
            layers = []
            for _ in range(n_layers):
                layers.append(DenseLayer(width, growth))
                width += growth
            self.blocks.append(nn.Sequential(*layers))
            skip_channels.append(width)
        self.skip_channels = skip_channels[:-1]
        self.out_channels = skip_channels[-1]

    def forward(self, x):
        feats = [self.stem(x)]
        x = self.pool(feats[0])
        for i, block in enumerate(self.blocks):
            if i:
                x = self.transitions[i - 1](x)
            x = block(x)
            feats.append(x)
        return feats[:-1], feats[-1]


_BACKBONES = {
    "vgg19": Vgg19Encoder,
    "resnet152": ResNet152Encoder,
    "densenet201": DenseNet201Encoder,
}


def make_backbone(name, depth, base_width, in_channels=1):
    if name not in _BACKBONES:
        raise ValueError(f"unknown backbone {name!r}")
    return _BACKBONES[name](depth=depth, base_width=base_width, in_channels=in_channels)
