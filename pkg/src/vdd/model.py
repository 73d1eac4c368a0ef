"""Dual-branch VAE: domain encoder, sample encoder, decoder and classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_STD_MIN, LOG_STD_MAX = -6.0, 4.0
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 32
    enc_channels: tuple[int, ...] = (64, 128, 256)
    enc_kernel: int = 4
    enc_stride: int = 2
    latent_s: int = 2048
    latent_d: int = 30  # 100 for CIFAR-style data
    embed_dim: int = 512
    res_blocks: int = 2  # per residual stage; the decoder has two stages
    dropout: float = 0.7

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if len(self.enc_channels) != 3:
            raise ValueError("sample encoder has exactly three conv blocks")
        if self.image_size % 4:
            raise ValueError("image size must be divisible by 4 (two 2x upsampling stages)")

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d


@dataclass
class GaussianLatent:
    mean: torch.Tensor
    log_std: torch.Tensor
    value: torch.Tensor

    def __post_init__(self):
        if not (self.mean.shape == self.log_std.shape == self.value.shape):
            raise ValueError("mean, log_std and value must share one shape")

    def __getitem__(self, idx) -> "GaussianLatent":
        return GaussianLatent(self.mean[idx], self.log_std[idx], self.value[idx])

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()


def reparameterize(mean, log_std, sample: bool, generator=None) -> GaussianLatent:
    log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
    if not sample:
        return GaussianLatent(mean, log_std, mean)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return GaussianLatent(mean, log_std, mean + log_std.exp() * eps)


class BasicBlock(nn.Module):
    """ResNet basic block (two 3x3 convs with an identity shortcut)."""

    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(ch)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class VddModel(nn.Module):
    def __init__(self, cfg: ModelConfig, num_domains: int, num_known: int):
        super().__init__()
        self.cfg = cfg
        self.num_domains = num_domains
        self.num_known = num_known
        c1, c2, c3 = cfg.enc_channels

        # domain branch
        self.domain_embedding = nn.Embedding(num_domains, cfg.embed_dim)
        self.domain_head = nn.Linear(cfg.embed_dim, 2 * cfg.latent_d)

        # sample branch
        k, s = cfg.enc_kernel, cfg.enc_stride
        pad = (k - 1) // 2 if s == 1 else (k - s) // 2 + (k - s) % 2
        layers, cin = [], 3
        for cout in cfg.enc_channels:
            layers += [nn.Conv2d(cin, cout, k, s, pad), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2)]
            cin = cout
        self.conv = nn.Sequential(*layers)
        with torch.no_grad():
            n_flat = self.conv(torch.zeros(2, 3, cfg.image_size, cfg.image_size)).flatten(1).shape[1]
        self.fc_mean = nn.Linear(n_flat, cfg.latent_s)
        self.fc_log_std = nn.Linear(n_flat, cfg.latent_s)

        # decoder: linear -> conv+ReLU -> two residual stages (each upsamples 2x) -> conv+sigmoid
        self._dec_res = cfg.image_size // 4
        self.dec_fc = nn.Linear(cfg.latent_s + cfg.latent_d, c3 * self._dec_res ** 2)
        self.dec_conv = nn.Conv2d(c3, c3, 3, padding=1)
        self.stage1 = nn.Sequential(
            *[BasicBlock(c3) for _ in range(cfg.res_blocks)],
            nn.ConvTranspose2d(c3, c2, 4, 2, 1), nn.BatchNorm2d(c2), nn.ReLU(),
        )
        self.stage2 = nn.Sequential(
            *[BasicBlock(c2) for _ in range(cfg.res_blocks)],
            nn.ConvTranspose2d(c2, c1, 4, 2, 1), nn.BatchNorm2d(c1), nn.ReLU(),
        )
        self.dec_out = nn.Conv2d(c1, 3, 3, padding=1)

        # classifier sees z_s only
        self.dropout = nn.Dropout(cfg.dropout)
        self.cls_head = nn.Linear(cfg.latent_s, num_known + 1)

    @property
    def num_classes(self) -> int:
        return self.num_known + 1

    def encode_domain(self, domain_index: torch.Tensor, generator=None, sample=None) -> GaussianLatent:
        domain_index = torch.as_tensor(domain_index, dtype=torch.long, device=self.domain_embedding.weight.device)
        if domain_index.numel() and (domain_index.min() < 0 or domain_index.max() >= self.num_domains):
            raise IndexError(f"domain index out of range [0, {self.num_domains})")
        h = self.domain_head(self.domain_embedding(domain_index))
        mean, log_std = h.chunk(2, dim=-1)
        return reparameterize(mean, log_std, self.training if sample is None else sample, generator)

    def encode_sample(self, x: torch.Tensor, generator=None, sample=None) -> GaussianLatent:
        size = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, size, size):
            raise ValueError(f"expected (B, 3, {size}, {size}) images, got {tuple(x.shape)}")
        h = self.conv(x).flatten(1)
        return reparameterize(
            self.fc_mean(h), self.fc_log_std(h), self.training if sample is None else sample, generator
        )

    def decode(self, z_s: torch.Tensor, z_d: torch.Tensor) -> torch.Tensor:
        if z_s.shape[-1] != self.cfg.latent_s or z_d.shape[-1] != self.cfg.latent_d:
            raise ValueError(
                f"latent widths ({z_s.shape[-1]}, {z_d.shape[-1]}) != ({self.cfg.latent_s}, {self.cfg.latent_d})"
            )
        if z_s.shape[0] != z_d.shape[0]:
            raise ValueError("z_s and z_d batch sizes differ")
        h = self.dec_fc(torch.cat([z_s, z_d], dim=1))
        h = h.view(-1, self.cfg.enc_channels[2], self._dec_res, self._dec_res)
        h = F.relu(self.dec_conv(h))
        h = self.stage2(self.stage1(h))
        return torch.sigmoid(self.dec_out(h))

    def classify_logits(self, z_s: torch.Tensor) -> torch.Tensor:
        if z_s.shape[-1] != self.cfg.latent_s:
            raise ValueError(f"classifier expects width {self.cfg.latent_s}, got {z_s.shape[-1]}")
        return self.cls_head(self.dropout(z_s))

    def classify(self, z_s: torch.Tensor) -> torch.Tensor:
        """Softmax probabilities over the C known classes plus unknown."""
        return F.softmax(self.classify_logits(z_s), dim=-1)


def encode_domain(model: VddModel, domain_index, generator=None) -> GaussianLatent:
    return model.encode_domain(domain_index, generator)


def encode_sample(model: VddModel, x, generator=None) -> GaussianLatent:
    return model.encode_sample(x, generator)


def decode(model: VddModel, z_s, z_d) -> torch.Tensor:
    return model.decode(z_s, z_d)


def classify(model: VddModel, z_s) -> torch.Tensor:
    return model.classify(z_s)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: VddModel, optimizer=None, **state) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "num_domains": model.num_domains,
        "num_known": model.num_known,
        "model": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        **state,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    version = ckpt.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> VddModel:
    model = VddModel(ModelConfig.from_dict(ckpt["model_config"]), ckpt["num_domains"], ckpt["num_known"])
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model
