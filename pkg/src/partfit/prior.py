"""Latent shape space over geometric primitives.

A point-set VAE is trained on primitives (spheres, ellipsoids, cylinders,
cones, and blends) sampled on the shared sphere grid with vertexwise
correspondence. Its conditional decoder — the same three-layer MLP used
for part surfaces — becomes the frozen shape prior; only latent codes are
optimized through it afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import bundleio
from .parts import (
    ENCODING_DIM,
    MlpParams,
    SphereTopology,
    init_mlp,
    mlp_forward,
    mlp_from_tensors,
    positional_encode,
    symmetrize,
)

PRIMITIVE_KINDS = ("sphere", "ellipsoid", "cylinder", "cone", "blend")
AXIS_RANGE = (0.2, 1.0)
RADIUS_RANGE = (0.1, 0.5)
HEIGHT_RANGE = (0.4, 1.0)


class PrimitiveError(ValueError):
    pass


@dataclass
class PrimitiveSample:
    kind: str
    params: dict
    points: torch.Tensor  # (m, 3)


def _check_range(name: str, value: float, lo: float, hi: float) -> None:
    if not (lo <= value <= hi):
        raise PrimitiveError(f"{name}={value} outside [{lo}, {hi}]")


def _surface_points(kind: str, params: dict, dirs: torch.Tensor) -> torch.Tensor:
    if kind == "sphere":
        r = float(params.get("radius", 1.0))
        _check_range("radius", r, *AXIS_RANGE)
        return dirs * r
    if kind == "ellipsoid":
        scales = [float(s) for s in params["scales"]]
        for s in scales:
            _check_range("scale", s, *AXIS_RANGE)
        return dirs * torch.tensor(scales)
    if kind == "cylinder":
        r = float(params["radius"])
        h = float(params["height"])
        _check_range("radius", r, *RADIUS_RANGE)
        _check_range("height", h, *HEIGHT_RANGE)
        rho = torch.sqrt(dirs[:, 0] ** 2 + dirs[:, 2] ** 2).clamp(min=1e-9)
        t = torch.minimum(h / dirs[:, 1].abs().clamp(min=1e-9), r / rho)
        return dirs * t.unsqueeze(1)
    if kind == "cone":
        r = float(params["radius"])
        h = float(params["height"])
        _check_range("radius", r, *RADIUS_RANGE)
        _check_range("height", h, *HEIGHT_RANGE)
        rho = torch.sqrt(dirs[:, 0] ** 2 + dirs[:, 2] ** 2)
        denom = rho + r * dirs[:, 1] / (2 * h)
        t_lat = torch.where(
            denom > 1e-9, (r / 2) / denom.clamp(min=1e-9), torch.full_like(denom, float("inf"))
        )
        t_base = torch.where(
            dirs[:, 1] < -1e-9, h / (-dirs[:, 1]).clamp(min=1e-9), torch.full_like(denom, float("inf"))
        )
        t = torch.minimum(t_lat, t_base)
        return dirs * t.unsqueeze(1)
    raise PrimitiveError(f"unknown primitive kind {kind!r}")


def gen_primitive(
    kind: str,
    params: dict,
    topo: SphereTopology,
    rng: np.random.Generator | None = None,
) -> PrimitiveSample:
    """Map the shared sphere directions onto a primitive surface.

    Correspondence is preserved (vertex i of every sample sits along the
    same sphere direction), so samples are directly comparable pointwise.
    """
    dirs = topo.vertices
    if kind == "blend":
        w = float(params["weight"])
        _check_range("weight", w, 0.0, 1.0)
        a = _surface_points(params["a"]["kind"], params["a"], dirs)
        b = _surface_points(params["b"]["kind"], params["b"], dirs)
        points = w * a + (1.0 - w) * b
    else:
        points = _surface_points(kind, params, dirs)
    return PrimitiveSample(kind=kind, params=params, points=points)


def _random_base_params(rng: np.random.Generator) -> dict:
    kind = PRIMITIVE_KINDS[rng.integers(0, 4)]  # non-blend kinds
    if kind == "sphere":
        return {"kind": kind, "radius": float(rng.uniform(*AXIS_RANGE))}
    if kind == "ellipsoid":
        return {"kind": kind, "scales": [float(rng.uniform(*AXIS_RANGE)) for _ in range(3)]}
    return {
        "kind": kind,
        "radius": float(rng.uniform(*RADIUS_RANGE)),
        "height": float(rng.uniform(*HEIGHT_RANGE)),
    }


def sample_primitive_dataset(
    topo: SphereTopology, count: int, rng: np.random.Generator
) -> torch.Tensor:
    """(count, m, 3) random primitive surfaces, blends included."""
    samples = []
    for _ in range(count):
        if rng.uniform() < 0.4:
            spec = {
                "weight": float(rng.uniform(0.0, 1.0)),
                "a": _random_base_params(rng),
                "b": _random_base_params(rng),
            }
            samples.append(gen_primitive("blend", spec, topo).points)
        else:
            spec = _random_base_params(rng)
            samples.append(gen_primitive(spec["kind"], spec, topo).points)
    return torch.stack(samples)


@dataclass
class VaeConfig:
    latent_dim: int = 32
    hidden: int = 256
    enc_hidden: tuple[int, int] = (64, 128)
    epochs: int = 200
    batch_size: int = 64
    lr: float = 2e-3
    lr_drop: tuple[float, float] = (0.7, 0.25)  # (epoch fraction, lr multiplier)
    beta: float = 1e-3  # KL weight
    lap_weight: float = 0.02
    norm_weight: float = 0.002


@dataclass
class VaeModel:
    enc_weights: list[torch.Tensor]  # per-point MLP, 2 layers
    enc_biases: list[torch.Tensor]
    head_mean: tuple[torch.Tensor, torch.Tensor]
    head_logvar: tuple[torch.Tensor, torch.Tensor]
    decoder: MlpParams
    latent_dim: int

    def parameters(self) -> list[torch.Tensor]:
        return [
            *self.enc_weights,
            *self.enc_biases,
            *self.head_mean,
            *self.head_logvar,
            *self.decoder.parameters(),
        ]


def init_vae(config: VaeConfig, generator: torch.Generator) -> VaeModel:
    h1, h2 = config.enc_hidden
    dims = [(h1, 3), (h2, h1)]
    enc_w, enc_b = [], []
    for out_d, in_d in dims:
        bound = math.sqrt(1.0 / in_d)
        w = torch.empty(out_d, in_d).uniform_(-bound, bound, generator=generator)
        b = torch.empty(out_d).uniform_(-bound, bound, generator=generator)
        enc_w.append(w)
        enc_b.append(b)
    pooled_dim = 2 * h2  # max-pool and mean-pool concatenated
    bound = math.sqrt(1.0 / pooled_dim)
    head_mean = (
        torch.empty(config.latent_dim, pooled_dim).uniform_(-bound, bound, generator=generator),
        torch.zeros(config.latent_dim),
    )
    # start with small posterior variance so early reparameterization noise
    # does not drown the code signal
    head_logvar = (
        torch.empty(config.latent_dim, pooled_dim).uniform_(-bound, bound, generator=generator),
        torch.full((config.latent_dim,), -4.0),
    )
    decoder = init_mlp(
        ENCODING_DIM + config.latent_dim, 3, hidden=config.hidden, generator=generator
    )
    return VaeModel(
        enc_weights=enc_w,
        enc_biases=enc_b,
        head_mean=head_mean,
        head_logvar=head_logvar,
        decoder=decoder,
        latent_dim=config.latent_dim,
    )


def encode(vae: VaeModel, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Point sets (m, 3) or (B, m, 3) -> (mean, logvar), each d-dim.

    Pooling (max and mean) over points makes the encoding invariant to
    point order.
    """
    squeeze = points.ndim == 2
    if squeeze:
        points = points.unsqueeze(0)
    h = points
    for w, b in zip(vae.enc_weights, vae.enc_biases):
        h = torch.relu(h @ w.T + b)
    pooled = torch.cat([h.max(dim=1).values, h.mean(dim=1)], dim=1)
    mu = pooled @ vae.head_mean[0].T + vae.head_mean[1]
    logvar = pooled @ vae.head_logvar[0].T + vae.head_logvar[1]
    if squeeze:
        return mu[0], logvar[0]
    return mu, logvar


def _instance_norm_batched(h, scale, shift):
    mean = h.mean(dim=1, keepdim=True)
    var = h.var(dim=1, unbiased=False, keepdim=True)
    return (h - mean) / torch.sqrt(var + 1e-5) * scale + shift


def decode_batched(vae: VaeModel, codes: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    """(B, d) codes -> (B, m, 3) symmetrized surfaces. Normalization
    statistics are taken per sample, matching single-part inference."""
    m = topo.num_vertices
    enc = positional_encode(topo.vertices).unsqueeze(0).expand(codes.shape[0], m, -1)
    x = torch.cat([enc, codes.unsqueeze(1).expand(-1, m, -1)], dim=2)
    p = vae.decoder
    h = x @ p.weights[0].T + p.biases[0]
    h = torch.nn.functional.leaky_relu(h, p.slope)
    h = _instance_norm_batched(h, p.norm_scale[0], p.norm_shift[0])
    h = h @ p.weights[1].T + p.biases[1]
    h = torch.nn.functional.leaky_relu(h, p.slope)
    h = _instance_norm_batched(h, p.norm_scale[1], p.norm_shift[1])
    out = h @ p.weights[2].T + p.biases[2]
    flipped = out[:, topo.mirror_index] * torch.tensor([-1.0, 1.0, 1.0])
    return 0.5 * (out + flipped)


def decode(vae: VaeModel, code: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    enc = positional_encode(topo.vertices)
    x = torch.cat([enc, code.expand(topo.num_vertices, -1)], dim=1)
    return symmetrize(mlp_forward(vae.decoder, x), topo)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(q || N(0, I)) for diagonal Gaussians, summed over
    dimensions (mean over any leading batch dims)."""
    kl = -0.5 * (1.0 + logvar - mu**2 - torch.exp(logvar))
    return kl.sum(dim=-1).mean()


def _batched_laplacian(verts: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    edges = topo.edges
    sums = torch.zeros_like(verts)
    sums = sums.index_add(1, edges[:, 0], verts[:, edges[:, 1]])
    sums = sums.index_add(1, edges[:, 1], verts[:, edges[:, 0]])
    nbr = sums / topo.vertex_degrees.to(verts.dtype)[None, :, None]
    return ((verts - nbr) ** 2).sum(dim=2).mean()


def _batched_normal(verts: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    f = topo.faces
    n = torch.cross(
        verts[:, f[:, 1]] - verts[:, f[:, 0]],
        verts[:, f[:, 2]] - verts[:, f[:, 0]],
        dim=2,
    )
    n = n / torch.linalg.norm(n, dim=2, keepdim=True).clamp(min=1e-12)
    pairs = topo.face_pairs
    cos = (n[:, pairs[:, 0]] * n[:, pairs[:, 1]]).sum(dim=2)
    return (1.0 - cos).mean()


def train_part_vae(
    dataset: torch.Tensor,
    topo: SphereTopology,
    config: VaeConfig,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[VaeModel, list[dict]]:
    """Train the VAE; returns the model and per-epoch loss averages.

    Raises on non-finite loss with the epoch and component breakdown.
    """
    from .optim import Adam, ParamGroup

    if dataset.ndim != 3 or dataset.shape[0] < 2:
        raise ValueError("dataset must be (N, m, 3) with N >= 2")
    gen = torch.Generator().manual_seed(seed)
    vae = init_vae(config, gen)
    for p in vae.parameters():
        p.requires_grad_(True)
    opt = Adam([ParamGroup("vae", vae.parameters(), lr=config.lr)])

    n = dataset.shape[0]
    history: list[dict] = []
    for epoch in range(config.epochs):
        drop_at = int(config.lr_drop[0] * config.epochs)
        opt.groups["vae"].lr = config.lr * (
            config.lr_drop[1] if epoch >= drop_at else 1.0
        )
        perm = torch.randperm(n, generator=gen)
        sums = {"recon": 0.0, "kl": 0.0, "lap": 0.0, "norm": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            if idx.numel() < 2:
                continue
            target = dataset[idx]
            mu, logvar = encode(vae, target)
            noise = torch.randn(mu.shape, generator=gen)
            z = mu + torch.exp(0.5 * logvar) * noise
            recon = decode_batched(vae, z, topo)
            recon_loss = ((recon - target) ** 2).sum(dim=2).mean()
            kl = kl_divergence(mu, logvar)
            lap = _batched_laplacian(recon, topo)
            nrm = _batched_normal(recon, topo)
            loss = (
                recon_loss
                + config.beta * kl
                + config.lap_weight * lap
                + config.norm_weight * nrm
            )
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"VAE training diverged at epoch {epoch}: recon={float(recon_loss.detach())} "
                    f"kl={float(kl)} lap={float(lap)} norm={float(nrm)}"
                )
            for p in vae.parameters():
                p.grad = None
            loss.backward()
            opt.step({"vae": [p.grad if p.grad is not None else torch.zeros_like(p) for p in vae.parameters()]})
            sums["recon"] += float(recon_loss.detach())
            sums["kl"] += float(kl.detach())
            sums["lap"] += float(lap.detach())
            sums["norm"] += float(nrm.detach())
            sums["total"] += float(loss.detach())
            batches += 1
        epoch_avg = {k: v / max(batches, 1) for k, v in sums.items()}
        epoch_avg["epoch"] = epoch
        history.append(epoch_avg)
        if log_every and (epoch + 1) % log_every == 0:
            print(
                f"[train-prior] epoch {epoch + 1}/{config.epochs} "
                f"recon={epoch_avg['recon']:.5f} kl={epoch_avg['kl']:.3f} total={epoch_avg['total']:.5f}"
            )
    for p in vae.parameters():
        p.requires_grad_(False)
    return vae, history


def reconstruction_error(vae: VaeModel, samples: torch.Tensor, topo: SphereTopology) -> float:
    """Mean per-point Euclidean error of encode -> decode round trips."""
    with torch.no_grad():
        mu, _ = encode(vae, samples)
        recon = decode_batched(vae, mu, topo)
        return float(torch.linalg.norm(recon - samples, dim=2).mean())


def save_vae(path, vae: VaeModel, extra_meta: dict | None = None) -> None:
    tensors = {
        "enc.w0": vae.enc_weights[0],
        "enc.w1": vae.enc_weights[1],
        "enc.b0": vae.enc_biases[0],
        "enc.b1": vae.enc_biases[1],
        "enc.mean_w": vae.head_mean[0],
        "enc.mean_b": vae.head_mean[1],
        "enc.logvar_w": vae.head_logvar[0],
        "enc.logvar_b": vae.head_logvar[1],
    }
    tensors.update(vae.decoder.named_tensors("prior."))
    meta = {"latent_dim": vae.latent_dim, "slope": vae.decoder.slope}
    meta.update(extra_meta or {})
    bundleio.save_bundle(path, tensors, meta)


def load_vae(path) -> VaeModel:
    tensors, meta = bundleio.load_bundle(path)
    tensors = {k: torch.from_numpy(v) for k, v in tensors.items()}
    decoder = mlp_from_tensors(tensors, "prior.", slope=float(meta.get("slope", 0.01)))
    return VaeModel(
        enc_weights=[tensors["enc.w0"], tensors["enc.w1"]],
        enc_biases=[tensors["enc.b0"], tensors["enc.b1"]],
        head_mean=(tensors["enc.mean_w"], tensors["enc.mean_b"]),
        head_logvar=(tensors["enc.logvar_w"], tensors["enc.logvar_b"]),
        decoder=decoder,
        latent_dim=int(meta["latent_dim"]),
    )


def load_prior(path) -> tuple[MlpParams, int]:
    """Load just the frozen decoder (the shape prior) from a VAE checkpoint."""
    vae = load_vae(path)
    return vae.decoder, vae.latent_dim
