"""Neural part surfaces.

Each part is a deformed unit sphere: sphere vertices are positionally
encoded and pushed through a shared, frozen prior decoder (conditioned on
a per-part latent code) plus a per-part deformation MLP. The canonical
output is mirror-symmetrized about x=0 and then rigidly attached to its
bone (scaled by bone length, rotated by the bone's global rotation, and
centered at the bone centroid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import torch

from .skeleton import BoneTransforms

ENCODING_BASES = 6
ENCODING_DIM = 3 * 2 * ENCODING_BASES  # 36
INSTANCE_NORM_EPS = 1e-5
# Grid tilt about +x. The sin/cos encoding cannot distinguish coordinate
# values +1 and -1 (all sines vanish, cosines are even), so no vertex may
# sit at an exact unit coordinate: longitudes are offset by half a step
# and the whole grid is tilted off the poles.
GRID_TILT = 0.3


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class SphereTopology:
    """Shared lat-long sphere grid with pole fans.

    ``nu`` longitudes x ``nv`` latitudes (including both poles), giving
    ``m = nu * (nv - 2) + 2`` vertices. When ``nu`` is even the vertex set
    is closed under the x -> -x mirror and ``mirror_index`` maps each
    vertex to its partner (poles map to themselves).
    """

    nu: int
    nv: int
    vertices: torch.Tensor  # (m, 3), unit norm
    faces: torch.Tensor  # (F, 3) long, outward-oriented

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @cached_property
    def mirror_index(self) -> torch.Tensor | None:
        if self.nu % 2 != 0:
            return None
        idx = torch.empty(self.num_vertices, dtype=torch.long)
        idx[0] = 0
        idx[-1] = self.num_vertices - 1
        # longitudes sit at half-step offsets, so phi -> pi - phi maps
        # column k to nu/2 - k - 1
        for ring in range(self.nv - 2):
            base = 1 + ring * self.nu
            for k in range(self.nu):
                idx[base + k] = base + (self.nu // 2 - k - 1) % self.nu
        return idx

    @cached_property
    def edges(self) -> torch.Tensor:
        """(E, 2) unique undirected edges."""
        f = self.faces
        pairs = torch.cat([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], dim=0)
        pairs = torch.sort(pairs, dim=1).values
        return torch.unique(pairs, dim=0)

    @cached_property
    def vertex_degrees(self) -> torch.Tensor:
        both = torch.cat([self.edges[:, 0], self.edges[:, 1]])
        return torch.bincount(both, minlength=self.num_vertices)

    @cached_property
    def face_pairs(self) -> torch.Tensor:
        """(P, 2) indices of faces sharing an edge (every edge on a closed mesh)."""
        owners: dict[tuple[int, int], list[int]] = {}
        for fi, (a, b, c) in enumerate(self.faces.tolist()):
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                owners.setdefault(key, []).append(fi)
        pairs = [fs for fs in owners.values() if len(fs) == 2]
        return torch.tensor(sorted(pairs), dtype=torch.long)


def make_sphere(nu: int, nv: int) -> SphereTopology:
    """Build the shared sphere grid; requires ``nu >= 3`` and ``nv >= 3``."""
    if nu < 3 or nv < 3:
        raise TopologyError(f"degenerate sphere resolution {nu}x{nv}")
    verts = [torch.tensor([0.0, 1.0, 0.0])]
    for ring in range(nv - 2):
        theta = math.pi * (ring + 1) / (nv - 1)
        for k in range(nu):
            phi = 2 * math.pi * (k + 0.5) / nu
            verts.append(
                torch.tensor(
                    [
                        math.sin(theta) * math.cos(phi),
                        math.cos(theta),
                        math.sin(theta) * math.sin(phi),
                    ]
                )
            )
    verts.append(torch.tensor([0.0, -1.0, 0.0]))
    vertices = torch.stack(verts).to(torch.float64)
    ct, st = math.cos(GRID_TILT), math.sin(GRID_TILT)
    tilt = torch.tensor([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]], dtype=torch.float64)
    vertices = (vertices @ tilt.T).to(torch.float32)
    vertices = vertices / torch.linalg.norm(vertices, dim=1, keepdim=True)

    def ring_vertex(ring: int, k: int) -> int:
        return 1 + ring * nu + (k % nu)

    faces = []
    for k in range(nu):
        faces.append([0, ring_vertex(0, k + 1), ring_vertex(0, k)])
    for ring in range(nv - 3):
        for k in range(nu):
            a = ring_vertex(ring, k)
            b = ring_vertex(ring, k + 1)
            c = ring_vertex(ring + 1, k + 1)
            d = ring_vertex(ring + 1, k)
            faces.append([a, b, c])
            faces.append([a, c, d])
    south = nu * (nv - 2) + 1
    for k in range(nu):
        faces.append([south, ring_vertex(nv - 3, k), ring_vertex(nv - 3, k + 1)])
    return SphereTopology(
        nu=nu, nv=nv, vertices=vertices, faces=torch.tensor(faces, dtype=torch.long)
    )


def positional_encode(x: torch.Tensor) -> torch.Tensor:
    """(..., 3) coordinates -> (..., 36) sin/cos features over 6 octaves."""
    feats = []
    for k in range(ENCODING_BASES):
        arg = (2.0**k) * math.pi * x
        feats.append(torch.sin(arg))
        feats.append(torch.cos(arg))
    return torch.cat(feats, dim=-1)


@dataclass
class MlpParams:
    """Three fully-connected layers; the two hidden layers carry
    per-channel instance-normalization affine parameters and LeakyReLU."""

    weights: list[torch.Tensor]  # 3 x (out, in)
    biases: list[torch.Tensor]  # 3 x (out,)
    norm_scale: list[torch.Tensor]  # 2 x (hidden,)
    norm_shift: list[torch.Tensor]  # 2 x (hidden,)
    slope: float = 0.01

    def parameters(self) -> list[torch.Tensor]:
        return [*self.weights, *self.biases, *self.norm_scale, *self.norm_shift]

    def named_tensors(self, prefix: str = "") -> dict[str, torch.Tensor]:
        out = {}
        for i in range(3):
            out[f"{prefix}w{i}"] = self.weights[i]
            out[f"{prefix}b{i}"] = self.biases[i]
        for i in range(2):
            out[f"{prefix}g{i}"] = self.norm_scale[i]
            out[f"{prefix}s{i}"] = self.norm_shift[i]
        return out

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    def requires_grad_(self, flag: bool) -> "MlpParams":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "MlpParams":
        return MlpParams(
            weights=[w.detach().clone() for w in self.weights],
            biases=[b.detach().clone() for b in self.biases],
            norm_scale=[g.detach().clone() for g in self.norm_scale],
            norm_shift=[s.detach().clone() for s in self.norm_shift],
            slope=self.slope,
        )


def init_mlp(
    in_dim: int,
    out_dim: int = 3,
    hidden: int = 256,
    generator: torch.Generator | None = None,
    zero_final: bool = False,
    slope: float = 0.01,
) -> MlpParams:
    """Kaiming-uniform init; ``zero_final`` zeroes the last layer so the
    network starts as the identity contribution."""
    dims = [in_dim, hidden, hidden, out_dim]
    weights, biases = [], []
    for i in range(3):
        fan_in = dims[i]
        bound = math.sqrt(1.0 / fan_in)
        w = torch.empty(dims[i + 1], dims[i])
        b = torch.empty(dims[i + 1])
        w.uniform_(-bound, bound, generator=generator)
        b.uniform_(-bound, bound, generator=generator)
        if zero_final and i == 2:
            w.zero_()
            b.zero_()
        weights.append(w)
        biases.append(b)
    return MlpParams(
        weights=weights,
        biases=biases,
        norm_scale=[torch.ones(hidden), torch.ones(hidden)],
        norm_shift=[torch.zeros(hidden), torch.zeros(hidden)],
        slope=slope,
    )


def mlp_from_tensors(tensors: dict, prefix: str = "", slope: float = 0.01) -> MlpParams:
    def grab(name):
        t = tensors[prefix + name]
        return t if isinstance(t, torch.Tensor) else torch.tensor(t)

    return MlpParams(
        weights=[grab(f"w{i}") for i in range(3)],
        biases=[grab(f"b{i}") for i in range(3)],
        norm_scale=[grab(f"g{i}") for i in range(2)],
        norm_shift=[grab(f"s{i}") for i in range(2)],
        slope=slope,
    )


def _instance_norm(h: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    mean = h.mean(dim=0, keepdim=True)
    var = h.var(dim=0, unbiased=False, keepdim=True)
    return (h - mean) / torch.sqrt(var + INSTANCE_NORM_EPS) * scale + shift


def mlp_forward(params: MlpParams, x: torch.Tensor) -> torch.Tensor:
    """Forward a batch of encoded points; normalization statistics are taken
    over the batch, so at least two points are required.

    Middle blocks run activation before normalization: normalizing first
    would subtract per-channel batch means and erase any constant
    conditioning input (such as a latent code broadcast over the batch).
    """
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("mlp_forward needs a batch of at least 2 points")
    if x.shape[1] != params.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != expected {params.in_dim}")
    h = x @ params.weights[0].T + params.biases[0]
    h = torch.nn.functional.leaky_relu(h, params.slope)
    h = _instance_norm(h, params.norm_scale[0], params.norm_shift[0])
    h = h @ params.weights[1].T + params.biases[1]
    h = torch.nn.functional.leaky_relu(h, params.slope)
    h = _instance_norm(h, params.norm_scale[1], params.norm_shift[1])
    return h @ params.weights[2].T + params.biases[2]


def symmetrize(points: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    """Average each vertex with the x-reflection of its mirror partner.

    The result satisfies ``reflect_x(out[q]) == out[mirror(q)]`` exactly and
    the operation is idempotent.
    """
    mirror = topo.mirror_index
    if mirror is None:
        raise TopologyError("topology is not closed under the x -> -x mirror (nu must be even)")
    flipped = points[mirror] * torch.tensor([-1.0, 1.0, 1.0], dtype=points.dtype)
    return 0.5 * (points + flipped)


def jitter_directions(
    vertices: torch.Tensor, sigma: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Perturb unit directions by ~sigma radians and renormalize."""
    if sigma <= 0:
        return vertices
    noise = torch.empty_like(vertices).uniform_(-sigma, sigma, generator=generator)
    moved = vertices + noise
    return moved / torch.linalg.norm(moved, dim=1, keepdim=True)


@dataclass
class PartSet:
    """Shared shape state for all parts: latent codes, per-part deformation
    MLPs, and the frozen prior decoder (``None`` disables the prior path)."""

    codes: torch.Tensor  # (b, d)
    deform: list[MlpParams]
    prior: MlpParams | None

    @property
    def num_parts(self) -> int:
        return self.codes.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.codes.shape[1]


@dataclass
class PartMesh:
    vertices: torch.Tensor  # (m, 3)
    faces: torch.Tensor  # (F, 3)


def part_canonical(
    topo: SphereTopology,
    parts: PartSet,
    index: int,
    jitter_sigma: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Canonical (pre-transform) surface points of one part, symmetrized."""
    base = jitter_directions(topo.vertices, jitter_sigma, generator)
    enc = positional_encode(base)
    if parts.prior is not None:
        code = parts.codes[index].expand(base.shape[0], -1)
        out = mlp_forward(parts.prior, torch.cat([enc, code], dim=1))
        out = out + mlp_forward(parts.deform[index], enc)
    else:
        out = base + mlp_forward(parts.deform[index], enc)
    return symmetrize(out, topo)


def all_canonical(
    topo: SphereTopology,
    parts: PartSet,
    jitter_sigma: float = 0.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """(b, m, 3) canonical points; one shared jitter draw per call."""
    base = jitter_directions(topo.vertices, jitter_sigma, generator)
    enc = positional_encode(base)
    outs = []
    for i in range(parts.num_parts):
        if parts.prior is not None:
            code = parts.codes[i].expand(base.shape[0], -1)
            out = mlp_forward(parts.prior, torch.cat([enc, code], dim=1))
            out = out + mlp_forward(parts.deform[i], enc)
        else:
            out = base + mlp_forward(parts.deform[i], enc)
        outs.append(symmetrize(out, topo))
    return torch.stack(outs)


def transform_points(
    points: torch.Tensor, rotation: torch.Tensor, centroid: torch.Tensor, scale: torch.Tensor
) -> torch.Tensor:
    return scale * (points @ rotation.T) + centroid


def assemble_part(
    index: int,
    topo: SphereTopology,
    parts: PartSet,
    transforms: BoneTransforms,
    jitter_sigma: float = 0.0,
    generator: torch.Generator | None = None,
) -> PartMesh:
    """Pose one part: canonical surface scaled by bone length, rotated by the
    bone's global rotation, and centered at the bone centroid."""
    canonical = part_canonical(topo, parts, index, jitter_sigma, generator)
    world = transform_points(
        canonical,
        transforms.rotations[index],
        transforms.centroids[index],
        transforms.lengths[index],
    )
    return PartMesh(vertices=world, faces=topo.faces)


def pose_canonical(
    canonical: torch.Tensor, transforms: BoneTransforms
) -> torch.Tensor:
    """(b, m, 3) canonical points -> posed world points under bone transforms."""
    rot = transforms.rotations  # (b, 3, 3)
    posed = torch.einsum("bij,bmj->bmi", rot, canonical)
    return transforms.lengths[:, None, None] * posed + transforms.centroids[:, None, :]
