"""Desk-scale 2D and 3D feature encoders plus the gradient-correctness check.

The 2D encoder is a patch MLP: linear patch embedding on non-overlapping
patches, residual MLP blocks with a smooth (tanh) nonlinearity, a linear
projection to the shared feature width D, then bilinear upsampling back to
input resolution. The 3D encoder embeds raw coordinates, alternates k-NN
mean aggregation with residual MLP blocks, projects to its own width, and a
final linear head maps into the same D as the 2D side.

Initialization is fan-in-scaled uniform drawn from numpy generators seeded
per parameter group, so encoders are bitwise reproducible from (config,
seed). Reverse-mode gradients come from torch autograd; `grad_check`
validates them against central finite differences.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericalError
from .seeding import rng_for


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    hidden_2d: int = 64
    blocks_2d: int = 2
    feature_dim: int = 32          # shared feature width D
    hidden_3d: int = 64
    blocks_3d: int = 2
    point_dim: int = 48            # 3D width before the dimension-aligning head
    knn_k: int = 8

    def validate(self):
        for name in ("patch_size", "hidden_2d", "blocks_2d", "feature_dim",
                     "hidden_3d", "blocks_3d", "point_dim", "knn_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.lin1 = nn.Linear(width, width)
        self.lin2 = nn.Linear(width, width)

    def forward(self, x):
        return x + self.lin2(torch.tanh(self.lin1(x)))


def _seed_parameters(module: nn.Module, seed: int):
    """Fan-in uniform weights, zero biases, one numpy stream per group."""
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
                continue
            fan_in = param.shape[1]
            bound = 1.0 / np.sqrt(fan_in)
            values = rng_for(seed, name).uniform(-bound, bound, size=tuple(param.shape))
            param.copy_(torch.from_numpy(values).to(param.dtype))


class ImageEncoder(nn.Module):
    """Patch-MLP pixel feature extractor, output H x W x D."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ps = cfg.patch_size
        self.patch_embed = nn.Linear(ps * ps * 3, cfg.hidden_2d)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.hidden_2d) for _ in range(cfg.blocks_2d))
        self.out_proj = nn.Linear(cfg.hidden_2d, cfg.feature_dim)
        _seed_parameters(self, seed)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """H x W x 3 -> H x W x D; a leading batch axis is also accepted."""
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        b, h, w, c = image.shape
        ps = self.cfg.patch_size
        if h % ps or w % ps:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {ps}")
        gh, gw = h // ps, w // ps
        patches = (
            image.reshape(b, gh, ps, gw, ps, c)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(b * gh * gw, ps * ps * c)
        )
        tokens = self.patch_embed(patches)
        for block in self.blocks:
            tokens = block(tokens)
        coarse = self.out_proj(tokens).reshape(b, gh, gw, -1)
        up = torch.nn.functional.interpolate(
            coarse.permute(0, 3, 1, 2),
            size=(h, w), mode="bilinear", align_corners=False,
        ).permute(0, 2, 3, 1)
        return up.squeeze(0) if single else up


def knn_indices(points: torch.Tensor, k: int) -> torch.Tensor:
    """N x k nearest-neighbor indices (self included), stable under ties."""
    n = points.shape[0]
    k_eff = min(k, n)
    diff = points[:, None, :] - points[None, :, :]
    d2 = (diff * diff).sum(dim=-1)
    order = torch.argsort(d2, dim=1, stable=True)
    return order[:, :k_eff]


class PointEncoder(nn.Module):
    """k-NN aggregation MLP over a point cloud, output N x D via the head."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.point_embed = nn.Linear(3, cfg.hidden_3d)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.hidden_3d) for _ in range(cfg.blocks_3d))
        self.out_proj = nn.Linear(cfg.hidden_3d, cfg.point_dim)
        self.head = nn.Linear(cfg.point_dim, cfg.feature_dim)
        _seed_parameters(self, seed)

    def forward(self, points: torch.Tensor, neighbor_idx: torch.Tensor | None = None) -> torch.Tensor:
        if points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if neighbor_idx is None:
            neighbor_idx = knn_indices(points, self.cfg.knn_k)
        h = self.point_embed(points)
        for block in self.blocks:
            h = h[neighbor_idx].mean(dim=1)
            h = block(h)
        return self.head(self.out_proj(h))


def forward_2d(encoder: ImageEncoder, image) -> torch.Tensor:
    """Run the 2D encoder on an H x W x 3 array or tensor."""
    if not torch.is_tensor(image):
        image = torch.from_numpy(np.ascontiguousarray(image))
    dtype = next(encoder.parameters()).dtype
    return encoder(image.to(dtype))


def forward_3d(encoder: PointEncoder, points, neighbor_idx=None) -> torch.Tensor:
    """Run the 3D encoder (head included) on an N x 3 array or tensor."""
    if not torch.is_tensor(points):
        points = torch.from_numpy(np.ascontiguousarray(points))
    if neighbor_idx is not None and not torch.is_tensor(neighbor_idx):
        neighbor_idx = torch.from_numpy(np.ascontiguousarray(neighbor_idx))
    dtype = next(encoder.parameters()).dtype
    return encoder(points.to(dtype), neighbor_idx)


# --- parameter bytes -------------------------------------------------------

def parameter_group_names(module: nn.Module) -> list:
    return [name for name, _ in module.named_parameters()]


def params_to_bytes(module: nn.Module) -> bytes:
    """Concatenate all parameters as little-endian float32, group order."""
    chunks = []
    for _, param in module.named_parameters():
        arr = param.detach().cpu().numpy().astype("<f4")
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def params_from_bytes(module: nn.Module, raw: bytes):
    offset = 0
    with torch.no_grad():
        for _, param in module.named_parameters():
            n = param.numel() * 4
            arr = np.frombuffer(raw[offset:offset + n], dtype="<f4").reshape(tuple(param.shape))
            param.copy_(torch.from_numpy(arr.copy()).to(param.dtype))
            offset += n
    if offset != len(raw):
        raise ValueError(f"parameter byte stream length mismatch: {offset} != {len(raw)}")


def params_hash(module: nn.Module) -> str:
    import hashlib

    return hashlib.sha256(params_to_bytes(module)).hexdigest()


# --- gradient checking -----------------------------------------------------

@dataclass
class GradReport:
    max_rel_error: dict
    tolerance: float
    probes: int
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def grad_check(params, loss_closure, probe_count: int = 200,
               tolerance: float = 1e-4, step: float = 1e-4,
               seed: int = 0) -> GradReport:
    """Compare analytic gradients against central finite differences.

    `params` is an nn.Module or an iterable of (name, tensor) pairs the
    closure depends on; pass only parameters the gradient is supposed to
    reach (a stop-gradient side legitimately disagrees with finite
    differences, which still see the value change). Probes are drawn
    uniformly over all coordinates (every coordinate when probe_count covers
    them). The relative error uses a 1e-2 denominator floor, so
    near-zero coordinates are compared absolutely at that scale; below it,
    central differences at the fixed step are truncation-noise. Run the
    model in float64 for tolerances near 1e-4.
    """
    if isinstance(params, nn.Module):
        named = list(params.named_parameters())
    else:
        named = list(params)
    tensors = [p for _, p in named]

    loss = loss_closure()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite: {loss}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(tensors, grads)]

    sizes = np.array([p.numel() for p in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if probe_count >= total:
        coords = np.arange(total)
    else:
        coords = rng_for(seed, "grad_check").choice(total, size=probe_count, replace=False)

    max_err = {name: 0.0 for name, _ in named}
    for coord in coords:
        i = int(np.searchsorted(offsets, coord, side="right") - 1)
        j = int(coord - offsets[i])
        flat = tensors[i].data.view(-1)
        orig = flat[j].item()

        def eval_at(delta):
            with torch.no_grad():
                flat[j] = orig + delta
                value = float(loss_closure())
                flat[j] = orig
            return value

        # Richardson-extrapolated central difference: O(step^4) truncation.
        d1 = eval_at(step) - eval_at(-step)
        d2 = eval_at(2 * step) - eval_at(-2 * step)
        fd = (8.0 * d1 - d2) / (12.0 * step)
        analytic = grads[i].view(-1)[j].item()
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-2)
        name = named[i][0]
        if rel > max_err[name]:
            max_err[name] = rel
    worst = max(max_err.values()) if max_err else 0.0
    return GradReport(max_rel_error=max_err, tolerance=tolerance,
                      probes=len(coords), passed=worst <= tolerance)
