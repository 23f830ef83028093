"""Regressors, conditional generator/discriminator, head registries and freezing."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

FEATURE_DIM = 512
CHECKPOINT_FORMAT = "continual-iqa-checkpoint"
CHECKPOINT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class MLPBackbone(nn.Module):
    """Desk-scale feature extractor: d_in -> 256 -> 512."""

    def __init__(self, d_in: int, hidden: int = 256, out_dim: int = FEATURE_DIM):
        super().__init__()
        self.d_in = d_in
        self.out_dim = out_dim
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected inputs of shape (batch, {self.d_in}), got {tuple(x.shape)}")
        return self.net(x)


class ResNetBackbone(nn.Module):
    """ResNet-18 without its classifier, for (batch, H, W, 3) images in [0, 1]."""

    out_dim = FEATURE_DIM

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18

        self.net = resnet18(weights=ResNet18_Weights.DEFAULT if pretrained else None)
        self.net.fc = nn.Identity()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"expected images of shape (batch, H, W, 3), got {tuple(x.shape)}")
        x = x.permute(0, 3, 1, 2)
        return self.net((x - self.mean) / self.std)


def build_backbone(kind: str = "mlp", d_in: int = 16, pretrained: bool = False) -> nn.Module:
    if kind == "mlp":
        return MLPBackbone(d_in)
    if kind == "resnet18":
        return ResNetBackbone(pretrained)
    raise ValueError(f"unknown backbone {kind!r}")


def extract_features(extractor: nn.Module, inputs: torch.Tensor) -> torch.Tensor:
    feats = extractor(inputs)
    if feats.shape != (inputs.shape[0], FEATURE_DIM):
        raise ValueError(f"extractor produced {tuple(feats.shape)}, expected ({inputs.shape[0]}, {FEATURE_DIM})")
    return feats


class PredictionHead(nn.Module):
    """FC-ReLU, FC, logistic: 512 -> 256 -> 1, output in (0, 1)."""

    def __init__(self, in_dim: int = FEATURE_DIM, hidden: int = 256):
        super().__init__()
        self.hidden = nn.Linear(in_dim, hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.ndim != 2 or h.shape[1] != self.hidden.in_features:
            raise ValueError(f"expected features of shape (batch, {self.hidden.in_features}), got {tuple(h.shape)}")
        return torch.sigmoid(self.out(torch.relu(self.hidden(h)))).squeeze(-1)


class SingleHeadRegressor(nn.Module):
    def __init__(self, extractor: nn.Module, head: PredictionHead | None = None):
        super().__init__()
        self.extractor = extractor
        self.head = head or PredictionHead()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(extract_features(self.extractor, x))


def predict_single(head: nn.Module, features: torch.Tensor) -> torch.Tensor:
    return head(features)


def _as_ids(ids, n: int) -> torch.Tensor:
    if isinstance(ids, (int, np.integer)):
        return torch.full((n,), int(ids), dtype=torch.long)
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.shape != (n,):
        raise ValueError(f"expected {n} distortion ids, got shape {tuple(ids.shape)}")
    return ids


def _route(heads: nn.ModuleDict, x: torch.Tensor, ids, what: str) -> torch.Tensor:
    """Apply ``heads[j]`` to the rows whose distortion id is ``j``."""
    ids = _as_ids(ids, x.shape[0])
    if ids.numel() and bool((ids == ids[0]).all()):
        j = int(ids[0])
        if str(j) not in heads:
            raise KeyError(f"no {what} head for distortion {j}; registered: {sorted(int(k) for k in heads)}")
        return heads[str(j)](x)
    out = None
    for j in ids.unique().tolist():
        if str(j) not in heads:
            raise KeyError(f"no {what} head for distortion {j}; registered: {sorted(int(k) for k in heads)}")
        mask = ids == j
        y = heads[str(j)](x[mask])
        if out is None:
            out = y.new_zeros((x.shape[0], *y.shape[1:]))
        out = out.index_put((mask,), y)
    if out is None:
        raise ValueError("empty batch")
    return out


class MultiHeadRegressor(nn.Module):
    """Shared extractor with one prediction head per distortion."""

    def __init__(self, extractor: nn.Module):
        super().__init__()
        self.extractor = extractor
        self.heads = nn.ModuleDict()

    def add_head(self, j: int) -> None:
        self.heads[str(j)] = PredictionHead()

    def predict_features(self, h: torch.Tensor, ids) -> torch.Tensor:
        return _route(self.heads, h, ids, "prediction")

    def forward(self, x: torch.Tensor, ids) -> torch.Tensor:
        return self.predict_features(extract_features(self.extractor, x), ids)


def predict_multi(multihead: MultiHeadRegressor, features: torch.Tensor, j) -> torch.Tensor:
    return multihead.predict_features(features, j)


class ConditionalGenerator(nn.Module):
    """Per-distortion Gaussian priors, shared embedding, per-distortion generation heads."""

    def __init__(self, noise_dim: int = FEATURE_DIM, latent_dim: int = FEATURE_DIM, out_dim: int = FEATURE_DIM):
        super().__init__()
        self.noise_dim, self.latent_dim, self.out_dim = noise_dim, latent_dim, out_dim
        self.mu = nn.ParameterDict()
        # sigma is stored as log-sigma so it stays positive under any update
        self.log_sigma = nn.ParameterDict()
        self.embed = nn.Sequential(nn.Linear(noise_dim, latent_dim), nn.LeakyReLU(0.2))
        self.heads = nn.ModuleDict()

    def add_head(self, j: int) -> None:
        self.mu[str(j)] = nn.Parameter(torch.zeros(self.noise_dim))
        self.log_sigma[str(j)] = nn.Parameter(torch.zeros(self.noise_dim))
        self.heads[str(j)] = nn.Linear(self.latent_dim, self.out_dim)

    def sigma(self, j: int) -> torch.Tensor:
        return self.log_sigma[str(j)].exp()

    def sample_noise(self, z: torch.Tensor, ids) -> torch.Tensor:
        ids = _as_ids(ids, z.shape[0])
        keys = list(self.mu.keys())
        position = {int(k): i for i, k in enumerate(keys)}
        missing = set(ids.unique().tolist()) - set(position)
        if missing:
            raise KeyError(f"no prior for distortions {sorted(missing)}; registered: {sorted(position)}")
        rows = torch.tensor([position[j] for j in ids.tolist()], dtype=torch.long)
        mu = torch.stack([self.mu[k] for k in keys])[rows]
        sigma = torch.stack([self.log_sigma[k] for k in keys]).exp()[rows]
        return mu + sigma * z

    def forward(self, z: torch.Tensor, s, ids) -> torch.Tensor:
        s = torch.as_tensor(s, dtype=z.dtype)
        if s.ndim == 0:
            s = s.expand(z.shape[0])
        if bool((s < 0).any()) or bool((s > 1).any()):
            raise ValueError("quality condition s must lie in [0, 1]")
        latent = self.embed(self.sample_noise(z, ids))
        return _route(self.heads, latent + s.unsqueeze(-1), ids, "generation")


def sample_noise(generator: ConditionalGenerator, j, z: torch.Tensor) -> torch.Tensor:
    return generator.sample_noise(z, j)


def generate(generator: ConditionalGenerator, z: torch.Tensor, s, j) -> torch.Tensor:
    squeeze = z.ndim == 1
    out = generator(z.unsqueeze(0) if squeeze else z, s, j)
    return out.squeeze(0) if squeeze else out


class _RealFakeHead(nn.Module):
    def __init__(self, latent_dim: int):
        super().__init__()
        self.out = nn.Linear(latent_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(x))


class ConditionalDiscriminator(nn.Module):
    """Shared embedding, per-distortion quality heads and real/fake heads."""

    def __init__(self, in_dim: int = FEATURE_DIM, latent_dim: int = 256):
        super().__init__()
        self.latent_dim = latent_dim
        self.embed = nn.Sequential(nn.Linear(in_dim, latent_dim), nn.LeakyReLU(0.2))
        self.quality_heads = nn.ModuleDict()
        self.realfake_heads = nn.ModuleDict()

    def add_head(self, j: int) -> None:
        self.quality_heads[str(j)] = nn.Linear(self.latent_dim, 1)
        self.realfake_heads[str(j)] = _RealFakeHead(self.latent_dim)

    def forward(self, h: torch.Tensor, ids) -> tuple[torch.Tensor, torch.Tensor]:
        latent = self.embed(h)
        quality = _route(self.quality_heads, latent, ids, "quality").squeeze(-1)
        realfake = _route(self.realfake_heads, latent, ids, "real/fake").squeeze(-1)
        return quality, realfake


def discriminate(discriminator: ConditionalDiscriminator, h: torch.Tensor, j) -> tuple[torch.Tensor, torch.Tensor]:
    squeeze = h.ndim == 1
    q, v = discriminator(h.unsqueeze(0) if squeeze else h, j)
    return (q.squeeze(0), v.squeeze(0)) if squeeze else (q, v)


def snapshot(module: nn.Module) -> nn.Module:
    """Deep, frozen copy of ``module``."""
    frozen = copy.deepcopy(module)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen.eval()


def checksum(params: Iterable[torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class ModelBundle:
    regressor: SingleHeadRegressor
    multihead: MultiHeadRegressor
    generator: ConditionalGenerator
    discriminator: ConditionalDiscriminator
    snapshots: dict[str, nn.Module] = field(default_factory=dict)
    registered: list[int] = field(default_factory=list)

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        groups = {
            "regressor.extractor": list(self.regressor.extractor.parameters()),
            "regressor.head": list(self.regressor.head.parameters()),
            "multihead.extractor": list(self.multihead.extractor.parameters()),
            "generator.embed": list(self.generator.embed.parameters()),
            "discriminator.embed": list(self.discriminator.embed.parameters()),
        }
        for j in self.registered:
            k = str(j)
            groups[f"multihead.head/{j}"] = list(self.multihead.heads[k].parameters())
            groups[f"generator.prior/{j}"] = [self.generator.mu[k], self.generator.log_sigma[k]]
            groups[f"generator.head/{j}"] = list(self.generator.heads[k].parameters())
            groups[f"discriminator.quality/{j}"] = list(self.discriminator.quality_heads[k].parameters())
            groups[f"discriminator.realfake/{j}"] = list(self.discriminator.realfake_heads[k].parameters())
        for name, module in self.snapshots.items():
            groups[f"snapshot.{name}"] = list(module.parameters())
        return groups

    def _select(self, selectors: str | Sequence[str]) -> list[torch.Tensor]:
        groups = self.parameter_groups()
        if isinstance(selectors, str):
            selectors = [selectors]
        params = []
        for sel in selectors:
            if sel not in groups:
                raise KeyError(f"unknown parameter group {sel!r}")
            params.extend(groups[sel])
        return params

    def freeze(self, selectors: str | Sequence[str]) -> None:
        for p in self._select(selectors):
            p.requires_grad_(False)

    def unfreeze(self, selectors: str | Sequence[str]) -> None:
        for p in self._select(selectors):
            p.requires_grad_(True)

    def checksums(self, selectors: Sequence[str] | None = None) -> dict[str, str]:
        groups = self.parameter_groups()
        names = groups if selectors is None else selectors
        return {name: checksum(groups[name]) for name in names}

    def registry_sizes(self) -> dict[str, int]:
        return {
            "multihead": len(self.multihead.heads),
            "generator": len(self.generator.heads),
            "priors": len(self.generator.mu),
            "quality": len(self.discriminator.quality_heads),
            "realfake": len(self.discriminator.realfake_heads),
        }


def build_bundle(backbone: str = "mlp", d_in: int = 16, seed: int = 0, pretrained: bool = False) -> ModelBundle:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        regressor = SingleHeadRegressor(build_backbone(backbone, d_in, pretrained))
        multihead = MultiHeadRegressor(copy.deepcopy(regressor.extractor))
        generator = ConditionalGenerator()
        discriminator = ConditionalDiscriminator()
    return ModelBundle(regressor, multihead, generator, discriminator)


def register_task_heads(bundle: ModelBundle, new_ids: Sequence[int], init_seed: int) -> None:
    dup = sorted(set(new_ids) & set(bundle.registered))
    if dup or len(set(new_ids)) != len(new_ids):
        raise ValueError(f"distortion ids already registered: {dup or list(new_ids)}")
    with torch.random.fork_rng():
        torch.manual_seed(init_seed)
        for j in new_ids:
            bundle.multihead.add_head(j)
            bundle.generator.add_head(j)
            bundle.discriminator.add_head(j)
            bundle.registered.append(int(j))


def save_checkpoint(path: str | Path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "payload": payload}, path)


def load_checkpoint(path: str | Path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob["payload"]
