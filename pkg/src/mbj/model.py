"""Feature extractors plus a bias-free prototype head."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


class MLPExtractor(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int = 128, out_dim: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (n, {self.in_dim}), got {tuple(x.shape)}")
        return self.fc2(F.relu(self.fc1(x)))


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetCifar(nn.Module):
    """ResNet-(6n+2) for 32x32 inputs; ``depth=32`` gives the usual CIFAR ResNet-32.

    Global average pooling makes it accept other input sizes too (re-ID crops).
    """

    def __init__(self, depth: int = 32, out_dim: int = 64):
        super().__init__()
        if (depth - 2) % 6:
            raise ValueError("depth must be 6n+2")
        n = (depth - 2) // 6
        self.conv1 = nn.Conv2d(3, 16, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        layers, in_planes = [], 16
        for planes, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(n):
                layers.append(BasicBlock(in_planes, planes, stride if i == 0 else 1))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.proj = nn.Identity() if out_dim == 64 else nn.Linear(64, out_dim)
        self.out_dim = out_dim
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (n, 3, H, W) images, got {tuple(x.shape)}")
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layers(out)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.proj(out)


class EmbeddingModel(nn.Module):
    """Extractor producing ``d``-dim embeddings and a ``C x d`` prototype head.

    In cosine mode (metric learning) the logits are cosine similarities;
    otherwise they are raw inner products.
    """

    def __init__(self, extractor: nn.Module, num_classes: int, normalize: bool = False, backbone: str = "custom"):
        super().__init__()
        self.extractor = extractor
        self.dim = extractor.out_dim
        self.num_classes = num_classes
        self.normalize = normalize
        self.backbone = backbone
        self.weight = nn.Parameter(torch.empty(num_classes, self.dim))
        nn.init.normal_(self.weight, std=0.01 if not normalize else 1.0)

    def forward(self, x):
        if len(x) == 0:
            raise ValueError("empty batch")
        emb = self.extractor(x)
        if self.normalize:
            logits = F.normalize(emb, dim=1) @ F.normalize(self.weight, dim=1).t()
        else:
            logits = emb @ self.weight.t()
        return emb, logits

    def read_prototypes(self) -> torch.Tensor:
        """Detached copy of the head, row ``k`` is the prototype of class ``k``."""
        return self.weight.detach().clone()

    def header(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "normalize": self.normalize,
            "backbone": self.backbone,
            "in_dim": getattr(self.extractor, "in_dim", None),
            "hidden_dim": getattr(getattr(self.extractor, "fc1", None), "out_features", None),
        }


def forward(model: EmbeddingModel, batch: torch.Tensor):
    return model(batch)


def read_prototypes(model: EmbeddingModel) -> torch.Tensor:
    return model.read_prototypes()


def build_model(
    backbone: str,
    num_classes: int,
    embed_dim: int = 64,
    in_dim: int | None = None,
    hidden_dim: int = 128,
    normalize: bool = False,
) -> EmbeddingModel:
    if backbone == "mlp":
        if in_dim is None:
            raise ValueError("mlp backbone needs in_dim")
        ext = MLPExtractor(in_dim, hidden_dim, embed_dim)
    elif backbone.startswith("resnet"):
        ext = ResNetCifar(int(backbone[len("resnet"):] or 32), embed_dim)
    else:
        raise ValueError(f"unknown backbone {backbone!r}")
    return EmbeddingModel(ext, num_classes, normalize=normalize, backbone=backbone)


def save_checkpoint(model: EmbeddingModel, path) -> None:
    torch.save({"header": model.header(), "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> EmbeddingModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    h = blob["header"]
    if h.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {h.get('format_version')}")
    model = build_model(
        h["backbone"],
        h["num_classes"],
        embed_dim=h["dim"],
        in_dim=h["in_dim"],
        hidden_dim=h["hidden_dim"] or 128,
        normalize=h["normalize"],
    )
    model.load_state_dict(blob["state_dict"])
    return model
