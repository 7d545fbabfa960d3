"""Fitting objective: silhouette, semantic-consistency Chamfer with its
E-step feature aggregation, pose priors, and mesh regularizers.

The semantic Chamfer couples screen-space geometry with feature-space
affinity: for a foreground pixel ``p`` and a surface point ``v``,

    D(p, v) = ||proj(v) - p||^2 + alpha * ||q(v) - k(p)||^2

and the loss is the symmetric sum of row and column minima of D. Pixel
coordinates are normalized to [0, 1]; per-vertex features ``q`` and image
features ``k`` are held fixed within an optimization step, so gradients
flow only through the projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .parts import SphereTopology
from .render import Camera, bilinear_sample, project


class ObjectiveError(RuntimeError):
    """Raised when a loss term goes non-finite; names the offending term."""


@dataclass
class LossWeights:
    alpha: float = 0.1  # feature-distance weight inside the Chamfer metric
    sem: float = 0.5
    pose: float = 0.1
    ang: float = 1.0
    lap: float = 0.1
    norm: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "sem", "pose", "ang", "lap", "norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class VertexFeatures:
    """Per-vertex feature table over the concatenated part vertices.

    Rows with ``count == 0`` have never been observed and are excluded from
    the semantic distance term. Initialized rows are unit-normalized.
    """

    q: torch.Tensor  # (b*m, f)
    count: torch.Tensor  # (b*m,) long

    @staticmethod
    def empty(num_vertices: int, feat_dim: int) -> "VertexFeatures":
        return VertexFeatures(
            q=torch.zeros(num_vertices, feat_dim),
            count=torch.zeros(num_vertices, dtype=torch.long),
        )

    @property
    def initialized(self) -> torch.Tensor:
        return self.count > 0

    def clone(self) -> "VertexFeatures":
        return VertexFeatures(q=self.q.clone(), count=self.count.clone())


def silhouette_loss(rendered: torch.Tensor, pseudo_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel difference for one instance."""
    if rendered.shape != pseudo_gt.shape:
        raise ValueError(
            f"silhouette shape mismatch {tuple(rendered.shape)} vs {tuple(pseudo_gt.shape)}"
        )
    return ((rendered - pseudo_gt) ** 2).mean()


def e_step(
    vertex_positions: torch.Tensor,
    cameras: list[Camera],
    feature_maps: torch.Tensor,
    visibility: torch.Tensor,
    previous: VertexFeatures | None = None,
) -> VertexFeatures:
    """Aggregate image features onto 3D vertices.

    ``vertex_positions`` is (n, V, 3) posed vertices per instance,
    ``feature_maps`` (n, hf, wf, f), ``visibility`` (n, V) boolean. Each
    vertex visible in at least one instance gets the unit-normalized mean
    of the bilinearly sampled features at its projections; vertices visible
    nowhere keep their previous row and count.
    """
    n, num_verts = visibility.shape
    f = feature_maps.shape[-1]
    with torch.no_grad():
        acc = torch.zeros(num_verts, f)
        hits = torch.zeros(num_verts, dtype=torch.long)
        for j in range(n):
            vis = visibility[j]
            if not vis.any():
                continue
            coords, _, _ = project(cameras[j], vertex_positions[j][vis])
            feats = bilinear_sample(feature_maps[j], coords)
            acc[vis] += feats
            hits[vis] += 1
        out = VertexFeatures.empty(num_verts, f)
        seen = hits > 0
        mean = acc[seen] / hits[seen].unsqueeze(1).to(acc.dtype)
        norm = torch.linalg.norm(mean, dim=1, keepdim=True).clamp(min=1e-12)
        out.q[seen] = mean / norm
        out.count[seen] = hits[seen]
        if previous is not None:
            keep = ~seen
            out.q[keep] = previous.q[keep]
            out.count[keep] = previous.count[keep]
    return out


def semantic_chamfer(
    pixel_coords: torch.Tensor,
    pixel_feats: torch.Tensor,
    point_coords: torch.Tensor,
    point_feats: torch.Tensor,
    alpha: float,
    point_feat_valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """Symmetric Chamfer in joint (position, feature) space.

    ``pixel_coords`` (P, 2) and ``point_coords`` (V, 2) are normalized
    screen positions; only the point side carries gradients. Points whose
    feature row is flagged invalid contribute geometry only. The feature
    term accumulates one coordinate at a time so the arithmetic matches an
    explicit per-pair evaluation.
    """
    if pixel_coords.shape[0] == 0:
        raise ValueError("semantic_chamfer: empty foreground pixel set")
    if point_coords.shape[0] == 0:
        raise ValueError("semantic_chamfer: empty surface sample")
    dx = point_coords[None, :, 0] - pixel_coords[:, None, 0]
    dy = point_coords[None, :, 1] - pixel_coords[:, None, 1]
    geo = dx * dx + dy * dy
    sem = torch.zeros_like(geo)
    for k in range(pixel_feats.shape[1]):
        dq = point_feats[None, :, k] - pixel_feats[:, None, k]
        sem = sem + dq * dq
    if point_feat_valid is not None:
        sem = sem * point_feat_valid.to(sem.dtype)[None, :]
    dist = geo + alpha * sem
    return dist.min(dim=1).values.sum() + dist.min(dim=0).values.sum()


def pose_prior_loss(poses: torch.Tensor, rest_pose: torch.Tensor) -> torch.Tensor:
    """Sum of squared Euler-angle deviations from the shared resting pose."""
    if poses.shape[-2:] != rest_pose.shape:
        raise ValueError("pose / rest-pose shape mismatch")
    return ((poses - rest_pose) ** 2).sum()


def angle_loss(poses: torch.Tensor, leg_bones: list[int]) -> torch.Tensor:
    """Penalize sideways (y/z-axis) rotations of leg bones only."""
    if not leg_bones:
        return poses.sum() * 0.0
    legs = poses[..., leg_bones, :]
    return (legs[..., 1] ** 2 + legs[..., 2] ** 2).sum()


def laplacian_loss(vertices: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    """Mean squared distance from each vertex to its neighbor centroid."""
    edges = topo.edges
    sums = torch.zeros_like(vertices)
    sums = sums.index_add(0, edges[:, 0], vertices[edges[:, 1]])
    sums = sums.index_add(0, edges[:, 1], vertices[edges[:, 0]])
    nbr_mean = sums / topo.vertex_degrees.unsqueeze(1).to(vertices.dtype)
    return ((vertices - nbr_mean) ** 2).sum(dim=1).mean()


def normal_loss(vertices: torch.Tensor, topo: SphereTopology) -> torch.Tensor:
    """Mean (1 - cos) angle between normals of edge-adjacent face pairs."""
    f = topo.faces
    n = torch.cross(
        vertices[f[:, 1]] - vertices[f[:, 0]],
        vertices[f[:, 2]] - vertices[f[:, 0]],
        dim=1,
    )
    n = n / torch.linalg.norm(n, dim=1, keepdim=True).clamp(min=1e-12)
    pairs = topo.face_pairs
    cos = (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(dim=1)
    return (1.0 - cos).mean()


@dataclass
class LossTerms:
    mask: torch.Tensor
    sem: torch.Tensor
    pose: torch.Tensor
    ang: torch.Tensor
    lap: torch.Tensor
    norm: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            k: float(getattr(self, k).detach())
            for k in ("mask", "sem", "pose", "ang", "lap", "norm")
        }


def total_objective(terms: LossTerms, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of all terms; aborts with attribution on non-finite input."""
    bad = [
        name
        for name in ("mask", "sem", "pose", "ang", "lap", "norm")
        if not torch.isfinite(getattr(terms, name)).all()
    ]
    if bad:
        raise ObjectiveError(f"non-finite loss component(s): {', '.join(bad)}")
    return (
        terms.mask
        + weights.sem * terms.sem
        + weights.pose * terms.pose
        + weights.ang * terms.ang
        + weights.lap * terms.lap
        + weights.norm * terms.norm
    )
