"""Perspective camera and rasterization.

Two render paths share the projection model:

* a soft, differentiable silhouette in which every face contributes a
  sigmoid of its signed squared screen distance to each pixel and the
  contributions aggregate as one minus the product of complements, and
* a hard z-buffered pass producing part-index / depth buffers and
  per-vertex visibility for feature sampling, texturing, and metrics.

Screen distances are measured in normalized [0, 1] image coordinates
(u right, v down); pixel (i, j) has center ((j + .5) / w, (i + .5) / h).
Both paths restrict work to per-face bounding boxes; outputs do not
depend on that tiling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .parts import PartMesh

DEFAULT_FOV_DEG = 30.0
DEFAULT_SIGMA = 1e-4


def focal_from_fov(fov_deg: float = DEFAULT_FOV_DEG) -> float:
    return 0.5 / math.tan(math.radians(fov_deg) / 2)


@dataclass
class Camera:
    """Extrinsics as (azimuth, elevation, roll) radians plus translation.

    World-to-camera: ``x_cam = R x + t`` with ``R = Rz(roll) Rx(el) Ry(az)``;
    the camera looks down +z. Focal length is fixed (not optimized).
    """

    rotation: torch.Tensor  # (3,)
    translation: torch.Tensor  # (3,)
    focal: float
    size: tuple[int, int]  # (h, w)

    def __post_init__(self):
        h, w = self.size
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if h < 16 or w < 16:
            raise ValueError("image size must be at least 16x16")

    def matrix(self) -> torch.Tensor:
        az, el, roll = self.rotation[1], self.rotation[0], self.rotation[2]
        # rotation stored as (elevation, azimuth, roll)
        ca, sa = torch.cos(az), torch.sin(az)
        ce, se = torch.cos(el), torch.sin(el)
        cr, sr = torch.cos(roll), torch.sin(roll)
        zero = torch.zeros_like(ca)
        one = torch.ones_like(ca)
        ry = torch.stack([ca, zero, sa, zero, one, zero, -sa, zero, ca]).reshape(3, 3)
        rx = torch.stack([one, zero, zero, zero, ce, -se, zero, se, ce]).reshape(3, 3)
        rz = torch.stack([cr, -sr, zero, sr, cr, zero, zero, zero, one]).reshape(3, 3)
        return rz @ rx @ ry

    def parameters(self) -> list[torch.Tensor]:
        return [self.rotation, self.translation]


def look_at_camera(
    azimuth_deg: float,
    elevation_deg: float,
    distance: float,
    target: torch.Tensor,
    size: tuple[int, int],
    roll_deg: float = 0.0,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> Camera:
    """Camera orbiting ``target``: the target lands on the optical axis at
    depth ``distance``."""
    rot = torch.tensor(
        [math.radians(elevation_deg), math.radians(azimuth_deg), math.radians(roll_deg)],
        dtype=torch.float32,
    )
    cam = Camera(
        rotation=rot,
        translation=torch.zeros(3),
        focal=focal_from_fov(fov_deg),
        size=size,
    )
    with torch.no_grad():
        offset = torch.tensor([0.0, 0.0, distance]) - cam.matrix() @ target
    cam.translation = offset
    return cam


def project(camera: Camera, points: torch.Tensor):
    """Pinhole projection.

    Returns ``(coords, depth, valid)``: coords (N, 2) in normalized [0, 1]
    units, camera-space depth (N,), and a flag marking points safely in
    front of the camera. Behind-camera points get clamped (meaningless but
    finite) coordinates; callers must consult ``valid``.
    """
    h, w = camera.size
    cam_pts = points @ camera.matrix().T + camera.translation
    z = cam_pts[:, 2]
    valid = z > 1e-6
    zs = torch.clamp(z, min=1e-6)
    u = 0.5 + camera.focal * (cam_pts[:, 0] / zs) * (h / w)
    v = 0.5 - camera.focal * (cam_pts[:, 1] / zs)
    return torch.stack([u, v], dim=1), z, valid


@dataclass
class RenderBuffers:
    silhouette: torch.Tensor  # (h, w) float in {0, 1}
    part_index: torch.Tensor  # (h, w) long, -1 background
    depth: torch.Tensor  # (h, w) float, +inf background
    vertex_visible: torch.Tensor  # (b, m) bool


def _face_pixel_pairs(tri_px: torch.Tensor, h: int, w: int, dilate: float):
    """Candidate (face, pixel) pairs from dilated per-face bounding boxes.

    ``tri_px`` is (F, 3, 2) detached triangle coordinates in pixel units.
    Returns flat tensors (face_id, px_i, px_j); empty tensors when no
    face has a live bounding box.
    """
    lo = tri_px.min(dim=1).values - dilate  # (F, 2) as (x, y)
    hi = tri_px.max(dim=1).values + dilate
    j0 = torch.clamp(torch.floor(lo[:, 0] - 0.5).long(), 0, w - 1)
    j1 = torch.clamp(torch.ceil(hi[:, 0] - 0.5).long(), 0, w - 1)
    i0 = torch.clamp(torch.floor(lo[:, 1] - 0.5).long(), 0, h - 1)
    i1 = torch.clamp(torch.ceil(hi[:, 1] - 0.5).long(), 0, h - 1)
    alive = (hi[:, 0] >= -0.5) & (lo[:, 0] <= w - 0.5) & (hi[:, 1] >= -0.5) & (lo[:, 1] <= h - 0.5)
    wbox = torch.where(alive, j1 - j0 + 1, torch.zeros_like(j0))
    hbox = torch.where(alive, i1 - i0 + 1, torch.zeros_like(i0))
    area = wbox * hbox
    total = int(area.sum())
    if total == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return empty, empty, empty
    face_id = torch.repeat_interleave(torch.arange(area.shape[0]), area)
    starts = torch.cumsum(area, dim=0) - area
    off = torch.arange(total) - starts[face_id]
    px_j = j0[face_id] + off % wbox[face_id]
    px_i = i0[face_id] + off // wbox[face_id]
    return face_id, px_i, px_j


def _point_triangle_sq_dist(tri: torch.Tensor, pts: torch.Tensor):
    """Squared 2D distance from points to triangle edges plus an inside flag.

    ``tri`` (K, 3, 2) and ``pts`` (K, 2) are paired. Distance is the
    minimum over the three edges of point-to-segment squared distance;
    the flag is true when the point lies inside the triangle. All three
    edges are processed in one batched pass.
    """
    a = tri
    b = tri[:, [1, 2, 0]]
    ab = b - a  # (K, 3, 2)
    ap = pts[:, None, :] - a
    t = ((ap * ab).sum(dim=2) / (ab * ab).sum(dim=2).clamp(min=1e-12)).clamp(0.0, 1.0)
    diff = ap - t.unsqueeze(2) * ab
    d2 = (diff * diff).sum(dim=2).min(dim=1).values
    cross = ab[:, :, 0] * ap[:, :, 1] - ab[:, :, 1] * ap[:, :, 0]
    inside = (cross >= 0).all(dim=1) | (cross <= 0).all(dim=1)
    return d2, inside


def soft_silhouette(
    meshes: list[PartMesh],
    camera: Camera,
    sigma: float = DEFAULT_SIGMA,
    cutoff_eps: float = 1e-5,
) -> torch.Tensor:
    """Differentiable soft silhouette in [0, 1], shape (h, w).

    Per face and pixel: ``sigmoid(sign * d^2 / sigma)`` with positive sign
    inside the projected triangle; pixels aggregate face influences as
    ``1 - prod(1 - D)``. Faces only touch pixels within a bounding box
    dilated by the distance at which influence falls below ``cutoff_eps``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = camera.size
    if not meshes:
        return torch.zeros(h, w)
    verts = torch.cat([m.vertices for m in meshes], dim=0)
    offsets = torch.cumsum(
        torch.tensor([0] + [m.vertices.shape[0] for m in meshes[:-1]]), dim=0
    )
    faces = torch.cat(
        [m.faces + offsets[i] for i, m in enumerate(meshes)], dim=0
    )
    coords, _, valid = project(camera, verts)
    tri = coords[faces]  # (F, 3, 2)
    front = valid[faces].all(dim=1)
    tri = tri[front]
    if tri.shape[0] == 0:
        return torch.zeros(h, w)

    scale = torch.tensor([float(w), float(h)])
    tri_px = (tri * scale).detach()
    dilate_norm = math.sqrt(sigma * math.log(1.0 / cutoff_eps - 1.0))
    dilate_px = dilate_norm * max(h, w) + 0.5
    face_id, px_i, px_j = _face_pixel_pairs(tri_px, h, w, dilate_px)
    if face_id.numel() == 0:
        return torch.zeros(h, w)

    centers = torch.stack([(px_j.float() + 0.5) / w, (px_i.float() + 0.5) / h], dim=1)
    d2, inside = _point_triangle_sq_dist(tri[face_id], centers)
    sign = torch.where(inside, 1.0, -1.0)
    influence = torch.sigmoid(sign * d2 / sigma).clamp(max=1.0 - 1e-7)
    log_keep = torch.log1p(-influence)
    acc = torch.zeros(h * w, dtype=verts.dtype)
    acc = acc.index_add(0, px_i * w + px_j, log_keep)
    return (1.0 - torch.exp(acc)).reshape(h, w)


def hard_rasterize(
    meshes: list[PartMesh],
    camera: Camera,
    vis_eps: float = 0.05,
) -> RenderBuffers:
    """Z-buffered rasterization with part ownership and vertex visibility.

    A vertex is visible when it projects inside the image, lies in front of
    the camera, and its depth is within ``vis_eps`` of the depth buffer at
    its pixel. Non-differentiable by construction.
    """
    h, w = camera.size
    depth_buf = torch.full((h * w,), float("inf"))
    part_buf = torch.full((h * w,), -1, dtype=torch.long)
    if not meshes:
        return RenderBuffers(
            silhouette=torch.zeros(h, w),
            part_index=part_buf.reshape(h, w),
            depth=depth_buf.reshape(h, w),
            vertex_visible=torch.zeros(0, 0, dtype=torch.bool),
        )

    with torch.no_grad():
        verts = torch.cat([m.vertices for m in meshes], dim=0)
        counts = [m.vertices.shape[0] for m in meshes]
        offsets = torch.cumsum(torch.tensor([0] + counts[:-1]), dim=0)
        faces = torch.cat([m.faces + offsets[i] for i, m in enumerate(meshes)], dim=0)
        face_part = torch.cat(
            [
                torch.full((m.faces.shape[0],), i, dtype=torch.long)
                for i, m in enumerate(meshes)
            ]
        )
        coords, z, valid = project(camera, verts)
        tri = coords[faces]
        tri_z = z[faces]
        front = valid[faces].all(dim=1)
        tri, tri_z, face_part_f = tri[front], tri_z[front], face_part[front]

        if tri.shape[0] > 0:
            scale = torch.tensor([float(w), float(h)])
            tri_px = tri * scale
            face_id, px_i, px_j = _face_pixel_pairs(tri_px, h, w, 0.0)
            if face_id.numel() > 0:
                centers = torch.stack(
                    [(px_j.float() + 0.5) / w, (px_i.float() + 0.5) / h], dim=1
                )
                t = tri[face_id]
                v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
                e1 = v1 - v0
                e2 = v2 - v0
                denom = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
                ok = denom.abs() > 1e-14
                dp = centers - v0
                b1 = (dp[:, 0] * e2[:, 1] - dp[:, 1] * e2[:, 0]) / torch.where(
                    ok, denom, torch.ones_like(denom)
                )
                b2 = (e1[:, 0] * dp[:, 1] - e1[:, 1] * dp[:, 0]) / torch.where(
                    ok, denom, torch.ones_like(denom)
                )
                b0 = 1.0 - b1 - b2
                inside = ok & (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
                if inside.any():
                    fid = face_id[inside]
                    pix = (px_i * w + px_j)[inside]
                    zs = tri_z[fid]
                    pair_depth = (
                        b0[inside] * zs[:, 0] + b1[inside] * zs[:, 1] + b2[inside] * zs[:, 2]
                    )
                    depth_buf.scatter_reduce_(0, pix, pair_depth, reduce="amin")
                    winner = pair_depth <= depth_buf[pix]
                    owner = torch.full((h * w,), 2**62, dtype=torch.long)
                    owner.scatter_reduce_(0, pix[winner], fid[winner], reduce="amin")
                    owned = owner < 2**62
                    part_buf[owned] = face_part_f[owner[owned]]

        vj = torch.clamp((coords[:, 0] * w).floor().long(), 0, w - 1)
        vi = torch.clamp((coords[:, 1] * h).floor().long(), 0, h - 1)
        in_img = (coords[:, 0] >= 0) & (coords[:, 0] < 1) & (coords[:, 1] >= 0) & (coords[:, 1] < 1)
        vis = valid & in_img & (z <= depth_buf[vi * w + vj] + vis_eps)
        m = counts[0]
        vertex_visible = vis.reshape(len(meshes), m) if len(set(counts)) == 1 else vis

    part_index = part_buf.reshape(h, w)
    return RenderBuffers(
        silhouette=(part_index >= 0).float(),
        part_index=part_index,
        depth=depth_buf.reshape(h, w),
        vertex_visible=vertex_visible,
    )


def bilinear_sample(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) grid at normalized coords (N, 2), clamping to the
    border. Coordinates follow the pixel-center convention above."""
    hgt, wid = grid.shape[0], grid.shape[1]
    x = torch.clamp(coords[:, 0] * wid - 0.5, 0.0, wid - 1.0)
    y = torch.clamp(coords[:, 1] * hgt - 0.5, 0.0, hgt - 1.0)
    x0 = x.floor().long().clamp(0, wid - 2) if wid > 1 else x.floor().long() * 0
    y0 = y.floor().long().clamp(0, hgt - 2) if hgt > 1 else y.floor().long() * 0
    x1 = (x0 + 1).clamp(max=wid - 1)
    y1 = (y0 + 1).clamp(max=hgt - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(1)
    fy = (y - y0.to(y.dtype)).unsqueeze(1)
    g = grid.reshape(hgt * wid, -1)
    v00 = g[y0 * wid + x0]
    v01 = g[y0 * wid + x1]
    v10 = g[y1 * wid + x0]
    v11 = g[y1 * wid + x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy
