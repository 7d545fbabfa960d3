"""Evaluation metrics: keypoint transfer (PCK), dense part transfer (PCP),
and overall/part mask IOU.

Transfers go 2D -> 3D -> 2D: a source-image point is lifted to the nearest
visible surface vertex under the source camera and re-projected into the
target view. Successful transfer therefore requires both reconstructions
to be right, which is what makes these scores meaningful without 3D
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .features import KeypointSet
from .parts import PartMesh
from .render import Camera, hard_rasterize, project


@dataclass
class SceneInstance:
    """One instance's posed part meshes with cached projection data."""

    camera: Camera
    vertex_part: torch.Tensor  # (V,) long
    coords_px: torch.Tensor  # (V, 2) pixel coordinates (x, y)
    depth: torch.Tensor  # (V,)
    visible: torch.Tensor  # (V,) bool
    part_index: torch.Tensor  # (h, w) long

    @property
    def size(self) -> tuple[int, int]:
        return self.camera.size


def build_scene(meshes: list[PartMesh], camera: Camera, vis_eps: float = 0.05) -> SceneInstance:
    buf = hard_rasterize(meshes, camera, vis_eps=vis_eps)
    verts = torch.cat([m.vertices for m in meshes], dim=0)
    coords, depth, _ = project(camera, verts)
    h, w = camera.size
    px = torch.stack([coords[:, 0] * w, coords[:, 1] * h], dim=1)
    vertex_part = torch.cat(
        [
            torch.full((m.vertices.shape[0],), i, dtype=torch.long)
            for i, m in enumerate(meshes)
        ]
    )
    return SceneInstance(
        camera=camera,
        vertex_part=vertex_part,
        coords_px=px,
        depth=depth,
        visible=buf.vertex_visible.reshape(-1),
        part_index=buf.part_index,
    )


def transfer_keypoint(
    src: SceneInstance,
    dst: SceneInstance,
    point_px: np.ndarray | torch.Tensor,
    r_max: float,
) -> tuple[np.ndarray | None, bool]:
    """Map one source-image point into the target image.

    Picks the visible vertex whose source projection is nearest to the
    point (ties broken toward smaller depth) and returns that vertex's
    target projection. Returns ``(None, False)`` when no visible vertex
    lies within ``r_max`` pixels.
    """
    p = torch.as_tensor(point_px, dtype=torch.float32)
    vis = src.visible
    if not bool(vis.any()):
        return None, False
    cand = torch.nonzero(vis, as_tuple=False).squeeze(1)
    d = torch.linalg.norm(src.coords_px[cand] - p, dim=1)
    dmin = d.min()
    if float(dmin) > r_max:
        return None, False
    tied = cand[d == dmin]
    vertex = tied[torch.argmin(src.depth[tied])]
    return dst.coords_px[vertex].numpy().copy(), True


def pck(
    scenes: list[SceneInstance],
    keypoint_sets: list[KeypointSet],
    threshold_frac: float,
    r_max_frac: float = 0.05,
) -> float:
    """Percentage of correctly transferred keypoints over all ordered pairs.

    Only keypoints flagged visible in the source are transferred; target
    ground truth must lie inside the image. Untransferable keypoints (no
    visible vertex within the lift radius) are excluded per pair.
    """
    if len(scenes) < 2:
        raise ValueError("pck needs at least two instances")
    h, w = scenes[0].size
    thr = threshold_frac * max(h, w)
    r_max = r_max_frac * max(h, w)
    correct = 0
    total = 0
    for s in range(len(scenes)):
        for t in range(len(scenes)):
            if s == t or keypoint_sets[s] is None or keypoint_sets[t] is None:
                continue
            kp_s, kp_t = keypoint_sets[s], keypoint_sets[t]
            for k in range(len(kp_s.names)):
                if not kp_s.visible[k]:
                    continue
                gt = kp_t.points[k]
                if not (0 <= gt[0] < w and 0 <= gt[1] < h):
                    continue
                pt, ok = transfer_keypoint(scenes[s], scenes[t], kp_s.points[k], r_max)
                if not ok:
                    continue
                total += 1
                if float(np.linalg.norm(pt - gt)) <= thr:
                    correct += 1
    return 100.0 * correct / total if total else 0.0


def transfer_part_pcp(
    scenes: list[SceneInstance],
    gt_labels: torch.Tensor,
    r_max_frac: float = 0.05,
) -> float:
    """Percentage of source pixels keeping their part label after transfer.

    Each labeled source pixel is lifted to its nearest visible vertex and
    re-projected into the target; it counts as correct when the target
    ground-truth label at the landing pixel matches the source label.

    Excluded from the denominator: pixels with no visible vertex within
    the lift radius, pixels whose vertex is self-occluded in the target,
    pixels whose transfer lands outside the target segmentation, and
    boundary-ambiguous pixels whose lifted vertex does not re-project onto
    a same-label pixel in the source itself (the lift for those pixels is
    undefined at raster granularity, for any reconstruction). A landing
    counts as correct when the source label appears within one pixel of
    the landing pixel, absorbing rounding at label-map granularity.
    """
    n = len(scenes)
    h, w = scenes[0].size
    r_max = r_max_frac * max(h, w)
    correct = 0
    total = 0
    lifted: list[tuple[torch.Tensor, torch.Tensor]] = []
    for s in range(n):
        lab = gt_labels[s]
        ii, jj = torch.nonzero(lab >= 0, as_tuple=True)
        centers = torch.stack([jj.float() + 0.5, ii.float() + 0.5], dim=1)
        vis_idx = torch.nonzero(scenes[s].visible, as_tuple=False).squeeze(1)
        if vis_idx.numel() == 0:
            lifted.append((torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long)))
            continue
        d = torch.cdist(centers, scenes[s].coords_px[vis_idx])
        nearest = d.argmin(dim=1)
        dmin = d.gather(1, nearest.unsqueeze(1)).squeeze(1)
        keep = dmin <= r_max
        verts = vis_idx[nearest[keep]]
        labels = lab[ii[keep], jj[keep]]
        # self-consistency: the vertex must land on its own label at home
        back = scenes[s].coords_px[verts]
        bj = torch.clamp(back[:, 0].floor().long(), 0, w - 1)
        bi = torch.clamp(back[:, 1].floor().long(), 0, h - 1)
        sane = lab[bi, bj] == labels
        lifted.append((verts[sane], labels[sane]))

    for s in range(n):
        verts_s, labels_s = lifted[s]
        if verts_s.numel() == 0:
            continue
        for t in range(n):
            if s == t:
                continue
            vis_t = scenes[t].visible[verts_s]
            if not bool(vis_t.any()):
                continue
            verts = verts_s[vis_t]
            labels = labels_s[vis_t]
            land = scenes[t].coords_px[verts]
            lj = torch.clamp(land[:, 0].floor().long(), 0, w - 1)
            li = torch.clamp(land[:, 1].floor().long(), 0, h - 1)
            gt_t = gt_labels[t][li, lj]
            on_target = gt_t >= 0
            hit = gt_t == labels
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ni = torch.clamp(li + di, 0, h - 1)
                    nj = torch.clamp(lj + dj, 0, w - 1)
                    hit = hit | (gt_labels[t][ni, nj] == labels)
            total += int(on_target.sum())
            correct += int((hit & on_target).sum())
    return 100.0 * correct / total if total else 0.0


def iou(mask_a: torch.Tensor, mask_b: torch.Tensor) -> float:
    """Intersection over union of two binary masks; empty union gives 0."""
    if mask_a.shape != mask_b.shape:
        raise ValueError("mask shapes differ")
    a = mask_a > 0.5
    b = mask_b > 0.5
    union = (a | b).sum()
    if int(union) == 0:
        return 0.0
    return float((a & b).sum() / union)


def part_iou(pred_labels: torch.Tensor, gt_labels: torch.Tensor) -> float:
    """Mean per-part IOU over the parts present in the ground truth."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label map shapes differ")
    present = torch.unique(gt_labels[gt_labels >= 0])
    if present.numel() == 0:
        return 0.0
    scores = [iou(pred_labels == int(p), gt_labels == int(p)) for p in present]
    return float(np.mean(scores))
