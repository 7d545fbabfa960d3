"""Synthetic ensemble generator with full ground truth.

Builds an articulated model from ellipsoid parts on the shared skeleton,
renders it from known cameras/poses, and emits a feature-ensemble bundle
whose foreground features are one-hot cluster codes plus Gaussian noise.
True cameras, poses, scales, part labels, and keypoints are written to a
ground-truth sidecar so fits can be scored against a known answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bundleio
from .features import write_ensemble
from .parts import PartMesh, SphereTopology, make_sphere
from .render import Camera, focal_from_fov, hard_rasterize, look_at_camera, project
from .skeleton import Skeleton, build_skeleton, forward_kinematics, load_template

PART_PALETTE = np.array(
    [
        [230, 80, 60], [60, 160, 230], [60, 200, 120], [240, 190, 60],
        [170, 90, 220], [240, 120, 180], [100, 220, 220], [150, 150, 90],
        [250, 140, 60], [90, 110, 240], [140, 230, 80], [220, 70, 120],
        [70, 190, 170], [200, 160, 230], [180, 200, 60], [120, 120, 120],
    ],
    dtype=np.uint8,
)


def default_distance(skeleton: Skeleton, fov_deg: float = 30.0, fill: float = 0.7) -> float:
    """Camera distance at which the rest skeleton spans ~``fill`` of the
    image height."""
    joints = skeleton.rest_joints
    span = float((joints.max(dim=0).values - joints.min(dim=0).values).max())
    span *= 1.3  # part surfaces extend beyond the joints
    return focal_from_fov(fov_deg) * span / fill


def _part_thickness(name: str) -> float:
    if name == "torso":
        return 0.42
    if name == "head":
        return 0.45
    if name == "neck":
        return 0.30
    if "upper" in name:
        return 0.24
    if "middle" in name:
        return 0.20
    return 0.18


def generator_canonical(skeleton: Skeleton, topo: SphereTopology) -> torch.Tensor:
    """(b, m, 3) canonical ellipsoid surfaces, one per bone, elongated along
    the rest bone direction in bone-length units."""
    dirs = skeleton.rest_bone_vectors / skeleton.rest_bone_lengths.unsqueeze(1)
    up = torch.tensor([0.0, 1.0, 0.0])
    alt = torch.tensor([0.0, 0.0, 1.0])
    parts = []
    for i, name in enumerate(skeleton.part_names):
        d = dirs[i]
        ref = alt if abs(float(d @ up)) > 0.9 else up
        n1 = torch.cross(ref, d, dim=0)
        n1 = n1 / torch.linalg.norm(n1)
        n2 = torch.cross(d, n1, dim=0)
        th = _part_thickness(name)
        u = topo.vertices
        pts = 0.55 * u[:, 1:2] * d + th * (u[:, 0:1] * n1 + u[:, 2:3] * n2)
        parts.append(pts)
    return torch.stack(parts)


def posed_generator_meshes(
    skeleton: Skeleton,
    topo: SphereTopology,
    canonical: torch.Tensor,
    pose: torch.Tensor,
    scales: torch.Tensor,
) -> list[PartMesh]:
    tf = forward_kinematics(skeleton, pose, scales)
    meshes = []
    for i in range(skeleton.num_bones):
        world = tf.lengths[i] * (canonical[i] @ tf.rotations[i].T) + tf.centroids[i]
        meshes.append(PartMesh(vertices=world, faces=topo.faces))
    return meshes


def default_part_clusters(skeleton: Skeleton) -> np.ndarray:
    """Semantic grouping used for feature synthesis: head/neck, torso,
    upper legs, lower+middle legs."""
    out = np.zeros(skeleton.num_bones, dtype=np.int64)
    for i, name in enumerate(skeleton.part_names):
        if name in ("head", "neck"):
            out[i] = 0
        elif name == "torso":
            out[i] = 1
        elif "upper" in name:
            out[i] = 2
        else:
            out[i] = 3
    return out


def default_part_groups(skeleton: Skeleton) -> np.ndarray:
    """Coarse transfer-evaluation classes: head+neck, torso, legs."""
    out = np.zeros(skeleton.num_bones, dtype=np.int64)
    for i, name in enumerate(skeleton.part_names):
        if name in ("head", "neck"):
            out[i] = 0
        elif name == "torso":
            out[i] = 1
        else:
            out[i] = 2
    return out


@dataclass
class SyntheticSpec:
    template: str = "quadruped"
    n: int = 8
    image_size: tuple[int, int] = (64, 64)
    feature_size: tuple[int, int] = (64, 64)
    label_size: tuple[int, int] = (256, 256)  # part-label maps for transfer metrics
    feat_dim: int = 16
    noise_sigma: float = 0.1
    nu: int = 16
    nv: int = 8
    azimuth_jitter_deg: float = 20.0
    elevation_deg: float = 10.0
    elevation_jitter_deg: float = 3.0
    distance_jitter: float = 0.1
    leg_swing: float = 0.22
    neck_swing: float = 0.15
    side_noise: float = 0.03
    scale_range: tuple[float, float] = (0.85, 1.15)
    fov_deg: float = 30.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.feat_dim < 4:
            raise ValueError("feat_dim must hold a one-hot code for 4 clusters")


@dataclass
class SynthTruth:
    skeleton: Skeleton
    topo: SphereTopology
    canonical: torch.Tensor  # (b, m, 3)
    cameras: list[Camera]
    azimuth_deg: np.ndarray
    elevation_deg: np.ndarray
    poses: torch.Tensor  # (n, b, 3)
    scales: torch.Tensor  # (b,)
    part_clusters: np.ndarray  # (b,) feature grouping
    part_groups: np.ndarray  # (b,) coarse transfer classes
    part_labels: torch.Tensor  # (n, H, W) long, bone-level, at label_size
    masks: torch.Tensor  # (n, h, w) float, at image_size
    image_size: tuple[int, int]
    label_size: tuple[int, int]

    @property
    def group_labels(self) -> torch.Tensor:
        """Part labels collapsed to the coarse transfer classes."""
        groups = torch.from_numpy(self.part_groups)
        return torch.where(
            self.part_labels >= 0,
            groups[self.part_labels.clamp(min=0)],
            torch.tensor(-1),
        )

    def meshes(self, instance: int, topo: SphereTopology | None = None) -> list[PartMesh]:
        """Posed ground-truth meshes; pass a finer ``topo`` to sample the
        analytic part surfaces more densely (for transfer metrics)."""
        topo = topo or self.topo
        canonical = (
            self.canonical
            if topo is self.topo
            else generator_canonical(self.skeleton, topo)
        )
        return posed_generator_meshes(
            self.skeleton, topo, canonical, self.poses[instance], self.scales
        )

    def label_camera(self, instance: int) -> Camera:
        cam = self.cameras[instance]
        return Camera(
            rotation=cam.rotation,
            translation=cam.translation,
            focal=cam.focal,
            size=tuple(self.label_size),
        )


def _sample_true_pose(skeleton: Skeleton, spec: SyntheticSpec, rng: np.random.Generator) -> torch.Tensor:
    pose = np.zeros((skeleton.num_bones, 3))
    for i, name in enumerate(skeleton.part_names):
        if i in skeleton.leg_bones:
            pose[i, 0] = rng.uniform(-spec.leg_swing, spec.leg_swing)
            pose[i, 1] = rng.uniform(-spec.side_noise, spec.side_noise)
            pose[i, 2] = rng.uniform(-spec.side_noise, spec.side_noise)
        elif name in ("neck", "head"):
            pose[i, 0] = rng.uniform(-spec.neck_swing, spec.neck_swing)
            pose[i, 1] = rng.uniform(-spec.side_noise, spec.side_noise)
            pose[i, 2] = rng.uniform(-spec.side_noise, spec.side_noise)
    return torch.tensor(pose, dtype=torch.float32)


def _sample_true_scales(skeleton: Skeleton, spec: SyntheticSpec, rng: np.random.Generator) -> torch.Tensor:
    lo, hi = spec.scale_range
    scales = np.ones(skeleton.num_bones)
    done = set()
    pair_of = {}
    for a, b in skeleton.symmetry_pairs:
        pair_of[a] = b
        pair_of[b] = a
    for i in range(skeleton.num_bones):
        if i in done:
            continue
        s = rng.uniform(lo, hi)
        scales[i] = s
        done.add(i)
        if i in pair_of:
            scales[pair_of[i]] = s
            done.add(pair_of[i])
    return torch.tensor(scales, dtype=torch.float32)


def make_synth(spec: SyntheticSpec, seed: int, out_dir) -> tuple[Path, SynthTruth]:
    """Generate the bundle and ground-truth sidecar; returns both."""
    rng = np.random.default_rng(seed)
    skeleton = build_skeleton(load_template(spec.template))
    topo = make_sphere(spec.nu, spec.nv)
    canonical = generator_canonical(skeleton, topo)
    part_clusters = default_part_clusters(skeleton)
    b = skeleton.num_bones
    h, w = spec.image_size
    hf, wf = spec.feature_size

    scales = _sample_true_scales(skeleton, spec, rng)
    rest_centroid = skeleton.rest_joints.mean(dim=0)
    base_dist = default_distance(skeleton, spec.fov_deg)
    hl, wl = spec.label_size

    poses, cams, az_list, el_list = [], [], [], []
    feats = np.zeros((spec.n, hf, wf, spec.feat_dim), dtype=np.float32)
    sals = np.zeros((spec.n, hf, wf), dtype=np.float32)
    masks = torch.zeros(spec.n, h, w)
    labels = torch.full((spec.n, hl, wl), -1, dtype=torch.long)
    images, keypoints = [], []

    # flank vertices (extremes perpendicular to the part axis) stay on the
    # outer surface, unlike bone tips which bury themselves in the joints
    kp_vertex_ids = [
        int(topo.vertices[:, 0].argmax()),
        int(topo.vertices[:, 0].argmin()),
        int(topo.vertices[:, 2].argmax()),
        int(topo.vertices[:, 2].argmin()),
    ]
    kp_names = [
        f"{name}:flank{t}" for name in skeleton.part_names for t in range(len(kp_vertex_ids))
    ]

    for j in range(spec.n):
        az = 360.0 * j / spec.n + rng.uniform(
            -spec.azimuth_jitter_deg, spec.azimuth_jitter_deg
        )
        el = spec.elevation_deg + rng.uniform(
            -spec.elevation_jitter_deg, spec.elevation_jitter_deg
        )
        dist = base_dist * (1.0 + rng.uniform(-spec.distance_jitter, spec.distance_jitter))
        pose = _sample_true_pose(skeleton, spec, rng)
        cam = look_at_camera(az, el, dist, rest_centroid, (h, w), fov_deg=spec.fov_deg)
        meshes = posed_generator_meshes(skeleton, topo, canonical, pose, scales)
        buf = hard_rasterize(meshes, cam)
        masks[j] = buf.silhouette
        lcam = Camera(
            rotation=cam.rotation.clone(),
            translation=cam.translation.clone(),
            focal=cam.focal,
            size=(hl, wl),
        )
        labels[j] = hard_rasterize(meshes, lcam).part_index

        # features on the feature grid, derived from a dedicated raster pass
        if (hf, wf) == (h, w):
            fbuf = buf
        else:
            fcam = Camera(
                rotation=cam.rotation.clone(),
                translation=cam.translation.clone(),
                focal=cam.focal,
                size=(hf, wf),
            )
            fbuf = hard_rasterize(meshes, fcam)
        fg = fbuf.part_index.numpy() >= 0
        cluster_map = np.where(fg, part_clusters[np.clip(fbuf.part_index.numpy(), 0, b - 1)], -1)
        onehot = np.zeros((hf, wf, spec.feat_dim), dtype=np.float32)
        for c in range(4):
            onehot[cluster_map == c, c] = 1.0
        noise = rng.normal(0.0, spec.noise_sigma, size=onehot.shape).astype(np.float32)
        feats[j] = onehot + (noise if spec.noise_sigma > 0 else 0.0)
        sals[j] = fbuf.silhouette.numpy()

        # flat per-part coloring gives a texture ground truth
        img = np.full((h, w, 3), 255, dtype=np.uint8)
        lab = buf.part_index.numpy()
        img[lab >= 0] = PART_PALETTE[lab[lab >= 0] % len(PART_PALETTE)]
        images.append(img)

        verts = torch.cat([m.vertices for m in meshes], dim=0)
        coords, depth, _ = project(cam, verts)
        vis = buf.vertex_visible.reshape(-1)
        pts, vis_flags = [], []
        for part in range(b):
            for vid in kp_vertex_ids:
                idx = part * topo.num_vertices + vid
                x = float(coords[idx, 0] * w)
                y = float(coords[idx, 1] * h)
                inside = 0 <= x < w and 0 <= y < h
                # a keypoint counts as visible only when its pixel is owned
                # by its own part and the depth gap is small: rim-grazing
                # vertices would otherwise flip visibility between rasters
                owned = False
                if inside:
                    pi_, pj_ = int(y), int(x)
                    owned = int(buf.part_index[pi_, pj_]) == part and bool(
                        depth[idx] <= buf.depth[pi_, pj_] + 0.01
                    )
                pts.append([x, y])
                vis_flags.append(bool(vis[idx]) and inside and owned)
        keypoints.append({"names": kp_names, "points": pts, "visible": vis_flags})

        poses.append(pose)
        cams.append(cam)
        az_list.append(az)
        el_list.append(el)

    out = Path(out_dir)
    write_ensemble(
        out,
        feats,
        sals,
        images=images,
        keypoints=keypoints,
        masks=masks.numpy(),
        image_size=(h, w),
        source={"generator": "synthetic-ellipsoid", "seed": seed},
    )

    poses_t = torch.stack(poses)
    part_groups = default_part_groups(skeleton)
    gt_dir = out / "gt"
    gt_dir.mkdir(exist_ok=True)
    bundleio.save_bundle(
        gt_dir / "truth.bundle",
        {
            "azimuth_deg": np.array(az_list, dtype=np.float64),
            "elevation_deg": np.array(el_list, dtype=np.float64),
            "cam_rotation": torch.stack([c.rotation for c in cams]),
            "cam_translation": torch.stack([c.translation for c in cams]),
            "poses": poses_t,
            "scales": scales,
            "part_clusters": part_clusters.astype(np.int32),
            "part_groups": part_groups.astype(np.int32),
            "part_labels": labels.numpy().astype(np.int32),
            "canonical": canonical,
        },
        meta={
            "template": spec.template,
            "n": spec.n,
            "image_size": list(spec.image_size),
            "feature_size": list(spec.feature_size),
            "label_size": list(spec.label_size),
            "nu": spec.nu,
            "nv": spec.nv,
            "focal": cams[0].focal,
            "seed": seed,
        },
    )

    truth = SynthTruth(
        skeleton=skeleton,
        topo=topo,
        canonical=canonical,
        cameras=cams,
        azimuth_deg=np.array(az_list),
        elevation_deg=np.array(el_list),
        poses=poses_t,
        scales=scales,
        part_clusters=part_clusters,
        part_groups=part_groups,
        part_labels=labels,
        masks=masks,
        image_size=(h, w),
        label_size=(hl, wl),
    )
    return out, truth


def load_truth(bundle_dir) -> SynthTruth:
    """Rehydrate the ground-truth sidecar written by :func:`make_synth`."""
    import json

    root = Path(bundle_dir)
    tensors, meta = bundleio.load_bundle(root / "gt" / "truth.bundle")
    skeleton = build_skeleton(load_template(meta["template"]))
    topo = make_sphere(int(meta["nu"]), int(meta["nv"]))
    h, w = meta["image_size"]
    cams = []
    for j in range(int(meta["n"])):
        cams.append(
            Camera(
                rotation=torch.from_numpy(tensors["cam_rotation"][j].copy()),
                translation=torch.from_numpy(tensors["cam_translation"][j].copy()),
                focal=float(meta["focal"]),
                size=(h, w),
            )
        )
    labels = torch.from_numpy(tensors["part_labels"].astype(np.int64))
    manifest = json.loads((root / "manifest.json").read_text())
    mask_list = []
    for ent in manifest["instances"]:
        raw = np.fromfile(root / ent["mask"], dtype="<f4").reshape(h, w)
        mask_list.append(torch.from_numpy(raw))
    return SynthTruth(
        skeleton=skeleton,
        topo=topo,
        canonical=torch.from_numpy(tensors["canonical"]),
        cameras=cams,
        azimuth_deg=tensors["azimuth_deg"],
        elevation_deg=tensors["elevation_deg"],
        poses=torch.from_numpy(tensors["poses"]),
        scales=torch.from_numpy(tensors["scales"]),
        part_clusters=tensors["part_clusters"].astype(np.int64),
        part_groups=tensors["part_groups"].astype(np.int64),
        part_labels=labels,
        masks=torch.stack(mask_list),
        image_size=(h, w),
        label_size=tuple(meta.get("label_size", (h, w))),
    )
