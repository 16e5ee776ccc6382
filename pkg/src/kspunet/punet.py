"""Probabilistic U-Net with a Kendall shape-space latent.

Three networks share one module:

* a plain U-Net producing a full-resolution feature map,
* a prior encoder (image only) and a posterior encoder (image plus mask),
  both rotation-equivariant, emitting an orientation vector ``v``, a raw mean
  shape ``M_raw`` and a concentration ``kappa``,
* a 1x1 head that decodes features concatenated with a latent sample.

The encoder output is turned into a von Mises-Fisher distribution on
``S^{(k-1)m-1}``: ``M_raw`` is projected to a pre-shape, its orientation is
removed with the rotation read off ``v``, and the result is mapped to the
sphere by ``psi``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import metrics, nnops, vmf
from .equivariant import FieldType, NormNonlinearity, SteerableConv2d, invariant_pool
from .errors import CheckpointError, InvalidConfig, ShapeMismatch
from .shape_space import helmert_submatrix, regular_polygon

log = logging.getLogger(__name__)

ORIENTATION_EPS = 1e-6
DEGENERATE_EPS = 1e-9
KL_ESTIMATORS = ("bound", "monte_carlo")


@dataclass
class ModelConfig:
    image_size: int = 64
    unet_depth: int = 3
    base_channels: int = 16
    classes: int = 2
    k: int = 4
    m: int = 2
    group_order: int = 8
    beta: float = 1.0
    gamma: float = 1.0
    weight_decay_scale: float = 1e-5
    kappa_min: float = 0.1
    kappa_max: float = vmf.KAPPA_MAX
    learning_rate: float = 1e-3
    epochs: int = 30
    seed: int = 0
    batch_size: int = 8
    kl_estimator: str = "bound"
    # multiplicities of frequency 0, 1, 2, ... fields in the encoder trunk
    trunk_fields: tuple[int, ...] = (4, 4, 2)
    kernel_size: int = 3

    def __post_init__(self):
        self.trunk_fields = tuple(int(c) for c in self.trunk_fields)
        self.validate()

    @property
    def latent_dim(self) -> int:
        return (self.k - 1) * self.m

    def validate(self) -> None:
        problems = []
        if self.m != 2:
            problems.append("only planar shapes (m = 2) are supported")
        if self.classes != 2:
            problems.append("only binary segmentation (classes = 2) is supported")
        if self.k < 3:
            problems.append("k must be >= 3")
        if self.unet_depth < 1 or self.base_channels < 1:
            problems.append("unet_depth and base_channels must be positive")
        if self.image_size < 1 or self.image_size % (2**self.unet_depth):
            problems.append(f"image_size {self.image_size} must be divisible by 2**unet_depth")
        if self.group_order % 4:
            problems.append("group_order must be a multiple of 4")
        if not 0 < self.kappa_min < self.kappa_max <= vmf.KAPPA_MAX:
            problems.append(f"need 0 < kappa_min < kappa_max <= {vmf.KAPPA_MAX}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            problems.append("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.kl_estimator not in KL_ESTIMATORS:
            problems.append(f"kl_estimator must be one of {KL_ESTIMATORS}")
        if not self.trunk_fields or self.trunk_fields[0] < 1 or min(self.trunk_fields) < 0:
            problems.append("trunk_fields needs at least one frequency-0 field")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append("kernel_size must be odd")
        if problems:
            raise InvalidConfig("; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trunk_fields"] = list(self.trunk_fields)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# building blocks


def _he(shape, fan_in, gen, gain=1.0):
    w = torch.randn(shape, generator=gen, dtype=torch.float64) * (gain * math.sqrt(2.0 / fan_in))
    return nn.Parameter(w.to(torch.get_default_dtype()))


class Conv(nn.Module):
    def __init__(self, c_in, c_out, size, gen, gain=1.0):
        super().__init__()
        self.weight = _he((c_out, c_in, size, size), c_in * size * size, gen, gain)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return nnops.conv2d(x, self.weight, self.bias)


class UNet(nn.Module):
    """Contracting/expanding conv+ReLU network with skip connections."""

    def __init__(self, in_channels: int, base: int, depth: int, gen: torch.Generator):
        super().__init__()
        self.depth = depth
        widths = [base * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.down.append(nn.ModuleList([Conv(c, w, 3, gen), Conv(w, w, 3, gen)]))
            c = w
        self.up = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.up.append(nn.ModuleList([Conv(c + w, w, 3, gen), Conv(w, w, 3, gen)]))
            c = w
        self.out_channels = c

    @staticmethod
    def _block(convs, x):
        for conv in convs:
            x = nnops.relu(conv(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] % 2**self.depth or x.shape[-2] % 2**self.depth:
            raise ShapeMismatch(f"U-Net input {tuple(x.shape)} not divisible by 2**{self.depth}")
        skips = []
        for level, convs in enumerate(self.down):
            x = self._block(convs, x)
            if level < self.depth:
                skips.append(x)
                x = nnops.avg_pool2(x)
        for convs, skip in zip(self.up, reversed(skips)):
            x = self._block(convs, nnops.concat_channels([nnops.upsample2(x), skip]))
        return x


@dataclass
class LatentHeadOutput:
    """Raw encoder output before any shape-space processing (batched)."""

    v: torch.Tensor  # (B, 2)
    m_raw: torch.Tensor  # (B, 2, k)
    kappa_raw: torch.Tensor  # (B,)


class ShapeEncoder(nn.Module):
    """Steerable trunk with 2x downsampling followed by the latent head.

    Input channels are frequency-0 fields. The head emits ``1 + k``
    frequency-1 fields, spatially averaged: the first is ``v``, the others are
    the landmark columns of ``M_raw``. The concentration comes from
    invariant-pooled trunk features through a dense layer.
    """

    def __init__(self, in_channels: int, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        n = cfg.group_order
        self.k = cfg.k
        in_type = FieldType.build(n, {0: in_channels})
        self.hidden = FieldType.build(n, {f: c for f, c in enumerate(cfg.trunk_fields) if c})
        head_type = FieldType.build(n, {1: 1 + cfg.k})
        self.convs = nn.ModuleList()
        self.acts = nn.ModuleList()
        t = in_type
        for _ in range(cfg.unet_depth + 1):
            self.convs.append(SteerableConv2d(t, self.hidden, cfg.kernel_size, generator=gen))
            self.acts.append(NormNonlinearity(self.hidden))
            t = self.hidden
        self.head = SteerableConv2d(self.hidden, head_type, cfg.kernel_size, generator=gen)
        n_inv = len(self.hidden.irreps)
        self.kappa_weight = _he((n_inv, 1), n_inv, gen, gain=0.5)
        self.kappa_bias = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> LatentHeadOutput:
        h = x
        last = len(self.convs) - 1
        for i, (conv, act) in enumerate(zip(self.convs, self.acts)):
            h = act(conv(h))
            if i < last:
                h = nnops.avg_pool2(h)
        out = nnops.reduce_mean(self.head(h), dim=(2, 3))
        v = out[:, :2]
        m_raw = out[:, 2:].reshape(-1, self.k, 2).transpose(1, 2)
        pooled = invariant_pool(h, self.hidden)
        kappa_raw = (nnops.matmul(pooled, self.kappa_weight) + self.kappa_bias)[:, 0]
        return LatentHeadOutput(v=v, m_raw=m_raw, kappa_raw=kappa_raw)


@dataclass
class Latent:
    """Batched latent distribution with the intermediate quantities kept for inspection."""

    mu: torch.Tensor  # (B, d) unit vectors
    kappa: torch.Tensor  # (B,)
    angle: torch.Tensor  # (B,) orientation read off v
    m0: torch.Tensor  # (B, 2, k) standardized pre-shape
    head: LatentHeadOutput = field(repr=False)

    def params(self, i: int = 0) -> vmf.VmfParams:
        """Float64 VmfParams for one batch element."""
        mu = self.mu[i].detach().to(torch.float64).numpy()
        return vmf.VmfParams(mu / np.linalg.norm(mu), float(self.kappa[i]))


def preshape_torch(m_raw: torch.Tensor) -> torch.Tensor:
    """Center over landmarks and scale to unit norm; degenerate rows fall back to a regular k-gon."""
    centered = m_raw - m_raw.mean(dim=-1, keepdim=True)
    norm = torch.sqrt((centered**2).sum(dim=(-2, -1)))
    bad = norm < DEGENERATE_EPS
    if bool(bad.any()):
        log.warning("degenerate mean shape for %d item(s); using the regular %d-gon", int(bad.sum()), m_raw.shape[-1])
    ref = torch.as_tensor(regular_polygon(m_raw.shape[-1]), dtype=m_raw.dtype)
    safe = torch.where(bad, torch.ones_like(norm), norm)
    return torch.where(bad[:, None, None], ref.expand_as(m_raw), centered / safe[:, None, None])


def orientation_torch(v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(cos, sin, angle) of the rotation carrying e1 to v; identity when |v| is tiny."""
    norm = torch.sqrt((v**2).sum(dim=1))
    small = norm < ORIENTATION_EPS
    safe = torch.where(small, torch.ones_like(norm), norm)
    c = torch.where(small, torch.ones_like(norm), v[:, 0] / safe)
    s = torch.where(small, torch.zeros_like(norm), v[:, 1] / safe)
    angle = torch.where(small, torch.zeros_like(norm), torch.atan2(v[:, 1], v[:, 0]))
    return c, s, angle


def psi_torch(x: torch.Tensor) -> torch.Tensor:
    h = torch.as_tensor(helmert_submatrix(x.shape[-1]), dtype=x.dtype)
    y = (x @ h.T).reshape(x.shape[0], -1)
    return y / torch.sqrt((y**2).sum(dim=1, keepdim=True))


def householder_torch(mu: torch.Tensor, w: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Differentiable counterpart of :func:`vmf.align_to_mean` (batched over rows of ``mu``)."""
    x = torch.cat([w[:, None], torch.sqrt(torch.clamp(1 - w * w, min=0.0))[:, None] * v], dim=1)
    e1 = torch.zeros_like(mu)
    e1[:, 0] = 1.0
    u = e1 - mu
    un = torch.sqrt((u**2).sum(dim=1, keepdim=True))
    flat = un < 1e-12
    u = u / torch.where(flat, torch.ones_like(un), un)
    reflected = x - 2 * (x * u).sum(dim=1, keepdim=True) * u
    out = torch.where(flat, x, reflected)
    return out / torch.sqrt((out**2).sum(dim=1, keepdim=True))


def kl_bound_torch(mu_q, kappa_q, mu_p, kappa_p) -> torch.Tensor:
    """Batched, differentiable version of :func:`vmf.kl_upper_bound`."""
    d = mu_q.shape[1]
    d = d if d % 2 else d + 1
    half = (d - 1) // 2
    lower = half - 1
    cos = (mu_q * mu_p).sum(dim=1)
    i = torch.arange(lower + 1, dtype=kappa_q.dtype)
    partial_exp = torch.exp(torch.logsumexp(i * torch.log(kappa_q)[:, None] - torch.lgamma(i + 1), dim=1))
    xlogx = half * lower * math.log(lower) if lower > 0 else 0.0
    return (kappa_q - kappa_p * cos + half * torch.log(kappa_q) + partial_exp
            - half * torch.log(kappa_p) + xlogx - lower**2 + 1.0)


def log_iv_torch(nu: float, z: torch.Tensor, series_terms: int = 200, asym_terms: int = 8) -> torch.Tensor:
    """log I_nu(z): power series up to vmf.SERIES_SWITCH, Hankel expansion above."""
    zs = torch.clamp(z, max=vmf.SERIES_SWITCH)
    j = torch.arange(series_terms, dtype=z.dtype)
    series = torch.logsumexp(
        (2 * j + nu) * torch.log(zs[:, None] / 2) - torch.lgamma(j + 1) - torch.lgamma(j + nu + 1), dim=1
    )
    za = torch.clamp(z, min=vmf.SERIES_SWITCH)
    mu4 = 4 * nu * nu
    term, total = torch.ones_like(za), torch.ones_like(za)
    for n in range(1, asym_terms):
        term = -term * (mu4 - (2 * n - 1) ** 2) / (n * 8 * za)
        total = total + term
    asym = za - 0.5 * torch.log(2 * math.pi * za) + torch.log(total)
    return torch.where(z <= vmf.SERIES_SWITCH, series, asym)


def log_normalizer_torch(d: int, kappa: torch.Tensor) -> torch.Tensor:
    nu = d / 2 - 1
    return nu * torch.log(kappa) - (d / 2) * math.log(2 * math.pi) - log_iv_torch(nu, kappa)


def kl_single_sample_torch(z, mu_q, kappa_q, mu_p, kappa_p) -> torch.Tensor:
    """One-sample estimate log q(z) - log p(z)."""
    d = z.shape[1]
    log_q = log_normalizer_torch(d, kappa_q) + kappa_q * (z * mu_q).sum(dim=1)
    log_p = log_normalizer_torch(d, kappa_p) + kappa_p * (z * mu_p).sum(dim=1)
    return log_q - log_p


# ---------------------------------------------------------------------------
# the model


class KendallProbUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.unet = UNet(1, cfg.base_channels, cfg.unet_depth, gen)
        self.prior = ShapeEncoder(1, cfg, gen)
        self.posterior = ShapeEncoder(2, cfg, gen)
        c, d = self.unet.out_channels, cfg.latent_dim
        self.comb1 = Conv(c + d, c, 1, gen)
        self.comb2 = Conv(c, c, 1, gen)
        # small final layer so an untrained model predicts ~0.5 everywhere
        self.comb3 = Conv(c, cfg.classes, 1, gen, gain=1e-2)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        return self.unet(image)

    def latent(self, image: torch.Tensor, mask: torch.Tensor | None = None) -> Latent:
        """Latent vMF for the prior (``mask is None``) or the posterior."""
        if mask is None:
            head = self.prior(image)
        else:
            head = self.posterior(nnops.concat_channels([image, mask]))
        m = preshape_torch(head.m_raw)
        c, s, angle = orientation_torch(head.v)
        # R^{-1} M with R = [[c, -s], [s, c]]
        m0 = torch.stack([c[:, None] * m[:, 0] + s[:, None] * m[:, 1],
                          -s[:, None] * m[:, 0] + c[:, None] * m[:, 1]], dim=1)
        mu = psi_torch(m0)
        kappa = torch.clamp(nnops.softplus(head.kappa_raw) + self.cfg.kappa_min, max=self.cfg.kappa_max)
        return Latent(mu=mu, kappa=kappa, angle=angle, m0=m0, head=head)

    def combine(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim or z.shape[0] != features.shape[0]:
            raise ShapeMismatch(f"latent sample {tuple(z.shape)} does not match features {tuple(features.shape)}")
        x = nnops.concat_channels([features, nnops.broadcast_spatial(z, *features.shape[-2:])])
        x = nnops.relu(self.comb1(x))
        x = nnops.relu(self.comb2(x))
        return self.comb3(x)

    def weight_parameters(self) -> list[torch.Tensor]:
        return [p for name, p in self.named_parameters() if name.rsplit(".", 1)[-1].endswith("weight")]


def _as_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.get_default_dtype())
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    return x


def draw_noise(kappas: Sequence[float], d: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Axial coordinates and tangent directions for one vMF draw per batch item."""
    w = np.array([vmf.sample_axial(d, float(k), 1, rng)[0] for k in kappas])
    v = vmf.sample_tangent(d, len(kappas), rng)
    return w, v


def loss_terms(model: KendallProbUNet, images: torch.Tensor, masks: torch.Tensor,
               noise: tuple[np.ndarray, np.ndarray] | None = None,
               rng: np.random.Generator | None = None) -> dict[str, torch.Tensor]:
    """Reconstruction, KL and weight terms plus their weighted total.

    ``noise`` fixes the posterior draw (useful for gradient checks); otherwise
    it is drawn from ``rng``. The axial coordinate enters as a constant.
    """
    cfg = model.cfg
    post = model.latent(images, masks)
    prior = model.latent(images)
    if noise is None:
        noise = draw_noise(post.kappa.detach().tolist(), cfg.latent_dim, rng)
    w, v = (torch.as_tensor(a, dtype=images.dtype) for a in noise)
    z = householder_torch(post.mu, w, v)
    logits = model.combine(model.features(images), z)
    recon = nnops.bce_with_logits(logits[:, 1] - logits[:, 0], masks[:, 0])
    if cfg.kl_estimator == "bound":
        kl = kl_bound_torch(post.mu, post.kappa, prior.mu, prior.kappa).mean()
    else:
        kl = kl_single_sample_torch(z, post.mu, post.kappa, prior.mu, prior.kappa).mean()
    weights = model.weight_parameters()
    sq = sum((p**2).sum() for p in weights)
    weight_reg = cfg.weight_decay_scale * sq / sum(p.numel() for p in weights)
    total = recon + cfg.beta * kl + cfg.gamma * weight_reg
    return {"loss": total, "recon": recon, "kl": kl, "weight_reg": weight_reg}


# ---------------------------------------------------------------------------
# training, checkpoints, inference


def save_model(model: KendallProbUNet, path: str | Path) -> None:
    nnops.save_checkpoint(path, dict(model.state_dict()), {"kind": "kspunet", "config": model.cfg.to_dict()})


def load_model(path: str | Path) -> KendallProbUNet:
    tensors, meta = nnops.load_checkpoint(path)
    if meta.get("kind") != "kspunet" or "config" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    model = KendallProbUNet(ModelConfig.from_dict(meta["config"]))
    expected = model.state_dict()
    if set(tensors) != set(expected) or any(tensors[k].shape != expected[k].shape for k in expected):
        raise CheckpointError(f"{path}: tensors do not match the configured architecture")
    model.load_state_dict({k: t.to(expected[k].dtype) for k, t in tensors.items()})
    return model


def _stack_dataset(dataset) -> tuple[torch.Tensor, list[np.ndarray]]:
    images = _as_batch(np.stack([s.image for s in dataset]))
    return images, [np.stack(s.masks).astype(np.float64) for s in dataset]


def train(dataset, cfg: ModelConfig, out_dir: str | Path | None = None,
          model: KendallProbUNet | None = None) -> tuple[KendallProbUNet, list[dict]]:
    """Adam over every parameter; one random annotator mask per image per step.

    With ``out_dir`` the checkpoint (``model.kspu``) and ``train_log.jsonl``
    are written there. Runs are bit-reproducible for a fixed seed when
    single-threaded.
    """
    if not dataset:
        raise InvalidConfig("training needs a non-empty dataset")
    if dataset[0].image.shape != (cfg.image_size, cfg.image_size):
        raise InvalidConfig(f"dataset images are {dataset[0].image.shape}, config expects {cfg.image_size}")
    model = model or KendallProbUNet(cfg)
    store = nnops.ParameterStore.from_module(model)
    rng = np.random.default_rng(cfg.seed)
    images, masks = _stack_dataset(dataset)
    n = len(dataset)
    history = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            sums = {"loss": 0.0, "recon": 0.0, "kl": 0.0, "weight_reg": 0.0}
            order = rng.permutation(n)
            for b in range(0, n, cfg.batch_size):
                idx = order[b : b + cfg.batch_size]
                y = np.stack([masks[i][rng.integers(len(masks[i]))] for i in idx])
                y = _as_batch(y)
                store.zero_grad()
                terms = loss_terms(model, images[idx], y, rng=rng)
                terms["loss"].backward()
                nnops.adam_step(store, lr=cfg.learning_rate)
                for key in sums:
                    sums[key] += terms[key].item() * len(idx)
            entry = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()},
                     "wall_clock": time.perf_counter() - start}
            if not all(math.isfinite(entry[k]) for k in sums):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}: {entry}")
            history.append(entry)
            log.info("epoch %d loss %.5f", epoch + 1, entry["loss"])
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    if out_dir is not None:
        save_model(model, out_dir / "model.kspu")
    return model, history


@torch.no_grad()
def latent_distribution(model: KendallProbUNet, image: np.ndarray, mask: np.ndarray | None = None) -> Latent:
    x = _as_batch(image).to(next(model.parameters()).dtype)
    y = None if mask is None else _as_batch(mask).to(x.dtype)
    return model.latent(x, y)


@torch.no_grad()
def sample_segmentations(model: KendallProbUNet, image: np.ndarray, n: int, rng: np.random.Generator,
                         kappa: float | None = None) -> np.ndarray:
    """``n`` binary masks from the prior; ``kappa`` overrides the predicted concentration."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lat = latent_distribution(model, image)
    params = lat.params(0)
    if kappa is not None:
        params = vmf.VmfParams(params.mu, float(kappa))
    z = torch.as_tensor(vmf.sample(params, n, rng), dtype=lat.mu.dtype)
    feats = model.features(_as_batch(image).to(lat.mu.dtype))
    logits = model.combine(feats.expand(n, -1, -1, -1), z)
    return (logits[:, 1] > logits[:, 0]).numpy().astype(np.uint8)


def evaluate(dataset, model: KendallProbUNet, n_samples: int, rng: np.random.Generator) -> tuple[list[dict], dict]:
    """Per-image metrics and their means."""
    rows = []
    for s in dataset:
        samples = sample_segmentations(model, s.image, n_samples, rng)
        rows.append({"id": s.id, **metrics.image_metrics(list(samples), list(s.masks))})
    keys = ("best_iou", "dice", "ged2", "diversity")
    agg = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys}
    return rows, {"aggregate": True, "n_images": len(rows), **agg}
