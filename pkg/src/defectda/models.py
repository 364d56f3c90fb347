"""Classifiers, U-Net aligners and dilated-convolution discriminators."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("small-cnn", "mobilenet-like", "resnet50-like", "resnet101-like")
TARGET_TO_SOURCE, SOURCE_TO_TARGET = "target_to_source", "source_to_target"


class ModelError(ValueError):
    pass


def _as_nchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        return x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ModelError(f"expected (B, H, W) or (B, 1, H, W) input, got {tuple(x.shape)}")
    return x


# --- classifier ------------------------------------------------------------------


class Classifier(nn.Module):
    """f = g(h(x)): grayscale adapter -> backbone blocks -> pooled dense head.

    ``forward`` returns logits (h); ``probs`` applies the softmax g.
    """

    def __init__(self, arch_name: str, blocks: list[nn.Module], feat_dim: int, num_classes: int,
                 input_side: int, pretrained: bool = False):
        super().__init__()
        self.arch_name = arch_name
        self.input_side = input_side
        self.pretrained = pretrained
        self.adapter = nn.Conv2d(1, 3, kernel_size=3, padding=1)
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(feat_dim, num_classes)
        self._frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _as_nchw(x)
        if x.shape[-1] != self.input_side or x.shape[-2] != self.input_side:
            raise ModelError(f"classifier built for side {self.input_side}, got {tuple(x.shape[-2:])}")
        x = self.adapter(x)
        for block in self.blocks:
            x = block(x)
        return self.head(torch.flatten(self.pool(x), 1))

    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Classifier":
        """Freeze all parameters and pin batch-norm statistics."""
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self.eval()

    def train(self, mode: bool = True):
        # a frozen classifier never leaves eval mode, so BN buffers stay put
        return super().train(mode and not self._frozen)

    def set_trainable(self, backbone_from: int | None) -> None:
        """Adapter and head always train; backbone blocks from index on (None = none)."""
        if self._frozen:
            raise ModelError("classifier is frozen")
        for p in self.parameters():
            p.requires_grad_(False)
        for module in (self.adapter, self.head):
            for p in module.parameters():
                p.requires_grad_(True)
        if backbone_from is not None:
            for block in list(self.blocks)[backbone_from:]:
                for p in block.parameters():
                    p.requires_grad_(True)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


def _small_cnn(width: int) -> tuple[list[nn.Module], int]:
    chans = [3, width, 2 * width, 4 * width, 4 * width]
    # strided stem: the first block works at a quarter of the input resolution
    blocks = [_conv_block(a, b, stride=2 if i == 0 else 1) for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))]
    return blocks, chans[-1]


def _torchvision_blocks(arch_name: str, pretrained: bool) -> tuple[list[nn.Module], int]:
    import torchvision.models as tvm

    if arch_name == "mobilenet-like":
        net = tvm.mobilenet_v3_small(weights="DEFAULT" if pretrained else None)
        feats = list(net.features)
        return feats, feats[-1].out_channels
    net = {"resnet50-like": tvm.resnet50, "resnet101-like": tvm.resnet101}[arch_name](
        weights="DEFAULT" if pretrained else None
    )
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return [stem, net.layer1, net.layer2, net.layer3, net.layer4], net.fc.in_features


def build_classifier(arch_name: str = "small-cnn", input_side: int = 128, num_classes: int = 2,
                     pretrained: bool = False, width: int = 16) -> Classifier:
    if arch_name not in ARCHS:
        raise ModelError(f"unknown arch {arch_name!r}; choose from {ARCHS}")
    if arch_name == "small-cnn":
        if pretrained:
            raise ModelError("small-cnn has no pretrained weights")
        blocks, feat_dim = _small_cnn(width)
    else:
        blocks, feat_dim = _torchvision_blocks(arch_name, pretrained)
    clf = Classifier(arch_name, blocks, feat_dim, num_classes, input_side, pretrained)
    # small head init keeps the untrained prediction close to uniform
    nn.init.normal_(clf.head.weight, std=0.01)
    nn.init.zeros_(clf.head.bias)
    return clf


def forward_logits(clf: Classifier, batch: torch.Tensor) -> torch.Tensor:
    if batch.shape[0] == 0:
        raise ModelError("empty batch")
    return clf(batch)


# --- aligner ---------------------------------------------------------------------


class Aligner(nn.Module):
    """pix2pix-style U-Net without cropping; output bounded to [0, 1].

    With ``residual`` the decoder predicts a correction in logit space on top
    of the input, so a zero-initialized head starts as the identity map.
    """

    def __init__(self, direction: str, input_side: int, width: int = 16, depth: int = 3, residual: bool = True):
        super().__init__()
        if direction not in (TARGET_TO_SOURCE, SOURCE_TO_TARGET):
            raise ModelError(f"unknown aligner direction {direction!r}")
        if input_side < 32 or input_side % (2**depth) or input_side // 2**depth < 4:
            raise ModelError(f"side {input_side} too small for {depth} downsamplings")
        self.direction = direction
        self.input_side = input_side
        self.residual = residual
        chans = [width * 2**min(i, 3) for i in range(depth)]
        self.downs = nn.ModuleList()
        cin = 1
        for i, c in enumerate(chans):
            layers: list[nn.Module] = [nn.Conv2d(cin, c, 4, stride=2, padding=1)]
            if i > 0:
                layers.append(nn.InstanceNorm2d(c, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            self.downs.append(nn.Sequential(*layers))
            cin = c
        self.bottleneck = nn.Sequential(nn.Conv2d(cin, cin, 3, padding=1), nn.ReLU(inplace=True))
        self.ups = nn.ModuleList()
        skips = [1] + chans[:-1]
        for i in reversed(range(depth)):
            out = max(skips[i], width)
            self.ups.append(nn.Sequential(
                nn.ConvTranspose2d(cin, out, 4, stride=2, padding=1),
                nn.InstanceNorm2d(out, affine=True),
                nn.ReLU(inplace=True),
            ))
            cin = out + skips[i]
        self.out = nn.Conv2d(cin, 1, 3, padding=1)
        if residual:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        x = _as_nchw(x)
        skips = [x]
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = self.bottleneck(skips.pop())
        for up in self.ups:
            h = torch.cat([up(h), skips.pop()], dim=1)
        z = self.out(h)
        if self.residual:
            z = z + torch.logit(x.clamp(1e-3, 1 - 1e-3))
        y = torch.sigmoid(z)
        return y.squeeze(1) if squeeze else y


def build_aligner(direction: str, input_side: int, width: int = 16, residual: bool = True) -> Aligner:
    return Aligner(direction, input_side, width=width, residual=residual)


# --- discriminator ---------------------------------------------------------------


class Discriminator(nn.Module):
    """Strided convs followed by dilated convs; one scalar score per image.

    ``taps`` returns L tensors: post-activation outputs of every hidden layer
    and, last, the per-image pre-sigmoid logit. ``forward`` is its sigmoid.
    """

    def __init__(self, input_side: int, width: int = 16, min_dilated: int = 2):
        super().__init__()
        if input_side < 32:
            raise ModelError(f"discriminator needs side >= 32, got {input_side}")
        self.input_side = input_side
        layers: list[nn.Module] = [
            nn.Sequential(nn.Conv2d(1, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
                          nn.InstanceNorm2d(2 * width, affine=True), nn.LeakyReLU(0.2)),
        ]
        rf, jump = 10, 4
        dilation = 2
        while len(layers) - 2 < min_dilated or rf < input_side // 2:
            layers.append(nn.Sequential(
                nn.Conv2d(2 * width, 2 * width, 3, padding=dilation, dilation=dilation),
                nn.InstanceNorm2d(2 * width, affine=True), nn.LeakyReLU(0.2),
            ))
            rf += 2 * dilation * jump
            dilation *= 2
        self.hidden = nn.ModuleList(layers)
        self.out = nn.Conv2d(2 * width, 1, 3, padding=1)
        self.receptive_field = rf

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = _as_nchw(x)
        acts = []
        for layer in self.hidden:
            h = layer(h)
            acts.append(h)
        acts.append(self.out(h).mean(dim=(1, 2, 3)))
        return acts

    def logit(self, x: torch.Tensor) -> torch.Tensor:
        return self.taps(x)[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(x))


def build_discriminator(input_side: int, width: int = 16) -> Discriminator:
    return Discriminator(input_side, width=width)


# --- checksums and checkpoints ---------------------------------------------------


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def save_checkpoint(module: nn.Module, directory: str | Path, name: str, arch_name: str, input_side: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), directory / f"{name}.pt")
    descriptor = f"arch_name={arch_name}\ninput_side={input_side}\nchecksum={parameter_checksum(module)}\n"
    (directory / f"{name}.txt").write_text(descriptor)
    return directory / f"{name}.pt"


def read_descriptor(path: str | Path) -> dict[str, str]:
    fields = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    missing = {"arch_name", "input_side", "checksum"} - fields.keys()
    if missing:
        raise ModelError(f"descriptor {path} lacks {sorted(missing)}")
    return fields


def load_checkpoint(module: nn.Module, directory: str | Path, name: str) -> nn.Module:
    directory = Path(directory)
    descriptor = read_descriptor(directory / f"{name}.txt")
    module.load_state_dict(torch.load(directory / f"{name}.pt", weights_only=True))
    if parameter_checksum(module) != descriptor["checksum"]:
        raise ModelError(f"checksum mismatch loading {name} from {directory}")
    return module
