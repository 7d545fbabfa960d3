"""End-to-end fitting driver and applications.

``optimize_ensemble`` runs the whole flow: preprocessing (PCA, clustering,
pseudo-silhouettes, part-to-cluster mapping, vertex-feature init), camera
spreading, and the three-phase alternating optimization with periodic
feature E-steps. The result carries the shared shape (bone scales, rest
rotations, latent codes, deformation MLPs) plus per-instance cameras and
poses, and round-trips through a single checkpoint file.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import bundleio
from .features import (
    ClusterModel,
    FeatureEnsemble,
    PartClusterMap,
    init_vertex_features,
    kmeans,
    load_ensemble,
    map_parts_heuristic,
    normalize_features,
    pca_reduce,
    pseudo_silhouette,
)
from .losses import (
    LossTerms,
    LossWeights,
    ObjectiveError,
    VertexFeatures,
    angle_loss,
    e_step,
    laplacian_loss,
    normal_loss,
    pose_prior_loss,
    semantic_chamfer,
    silhouette_loss,
    total_objective,
)
from .optim import Adam, GradientError, ParamGroup, ScheduleConfig, compute_gradients, schedule
from .parts import (
    MlpParams,
    PartMesh,
    PartSet,
    SphereTopology,
    all_canonical,
    init_mlp,
    make_sphere,
    mlp_from_tensors,
    pose_canonical,
)
from .prior import load_prior
from .render import Camera, bilinear_sample, focal_from_fov, hard_rasterize, look_at_camera, project, soft_silhouette
from .skeleton import (
    Skeleton,
    build_skeleton,
    forward_kinematics,
    load_template,
    resting_pose,
    spec_from_dict,
    spec_to_dict,
)
from .synth import PART_PALETTE, default_distance


def _mix_seed(*keys: int) -> int:
    """Deterministic 63-bit hash of integer keys (splitmix-style)."""
    state = 0x9E3779B97F4A7C15
    for k in keys:
        state = (state ^ (k + 0x9E3779B97F4A7C15)) & 0xFFFFFFFFFFFFFFFF
        state = (state * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        state ^= state >> 31
    return state & 0x7FFFFFFFFFFFFFFF


def _generator(*keys: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(_mix_seed(*keys))
    return gen


def stratified_subsample(n: int, k: int, generator: torch.Generator) -> torch.Tensor:
    """At most ``k`` indices out of ``n``, one uniform draw per stratum."""
    if n <= k:
        return torch.arange(n)
    starts = (torch.arange(k) * n) // k
    ends = (torch.arange(1, k + 1) * n) // k
    r = torch.rand(k, generator=generator)
    return starts + (r * (ends - starts).float()).floor().long()


@dataclass
class FitConfig:
    ensemble: str = ""
    skeleton: str = "quadruped"
    prior: str | None = None
    part_map: str | None = None
    out_dir: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    phases: tuple[int, int, int] = (300, 300, 500)
    em_period: int = 2
    lr_camera: float = 0.05
    lr_pose: float = 0.02
    lr_scales: float = 0.01
    lr_codes: float = 0.01
    lr_deform: float = 0.005
    render_size: tuple[int, int] | None = None
    nu: int = 32
    nv: int = 16
    sigma: float = 1e-4
    soft_cutoff: float = 1e-5
    max_pixels: int = 1024
    max_points: int = 1024
    pca_dim: int | None = 64
    clusters: int = 4
    seed: int = 0
    jitter: float = 1e-3
    use_part_prior: bool = True
    camera_elevation_deg: float = 10.0
    camera_fill: float = 0.7
    fov_deg: float = 30.0
    vis_eps: float = 0.05
    code_init: str = "ellipsoid"  # "ellipsoid" (encode a bone-aligned blank
    # part through the prior encoder) or "prior-mean" (zero codes)
    init_half_length: float = 0.55
    init_thickness: float = 0.25

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(phases=tuple(self.phases), em_period=self.em_period)

    def validate(self) -> None:
        if not self.ensemble:
            raise ValueError("config requires an ensemble path")
        if not Path(self.ensemble).exists():
            raise FileNotFoundError(f"ensemble not found: {self.ensemble}")
        if self.use_part_prior and self.prior and not Path(self.prior).exists():
            raise FileNotFoundError(f"prior checkpoint not found: {self.prior}")
        if self.part_map and not Path(self.part_map).exists():
            raise FileNotFoundError(f"part map not found: {self.part_map}")
        if any(p < 0 for p in self.phases):
            raise ValueError("phase lengths must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @staticmethod
    def from_dict(data: dict) -> "FitConfig":
        data = dict(data)
        weights = data.pop("weights", {})
        cfg = FitConfig(**{k: v for k, v in data.items() if k in FitConfig.__dataclass_fields__})
        cfg.weights = LossWeights(**weights) if isinstance(weights, dict) else weights
        cfg.phases = tuple(cfg.phases)
        if cfg.render_size is not None:
            cfg.render_size = tuple(cfg.render_size)
        return cfg

    @staticmethod
    def from_json(path) -> "FitConfig":
        return FitConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FitResult:
    """Shared shape parameters plus per-instance camera and pose."""

    skeleton: Skeleton
    topo: SphereTopology
    scales: torch.Tensor  # (b,) positive
    rest_pose: torch.Tensor  # (b, 3)
    parts: PartSet
    cameras: list[Camera]
    poses: torch.Tensor  # (n, b, 3)
    q: VertexFeatures
    part_map: PartClusterMap
    config: FitConfig
    loss_history: list[dict] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.poses.shape[0]

    def canonical(self, topo: SphereTopology | None = None) -> torch.Tensor:
        """(b, m, 3) canonical part surfaces without jitter."""
        with torch.no_grad():
            return all_canonical(topo or self.topo, self.parts)

    def transforms(self, instance: int):
        return forward_kinematics(self.skeleton, self.poses[instance], self.scales)

    def meshes(self, instance: int, topo: SphereTopology | None = None) -> list[PartMesh]:
        topo = topo or self.topo
        with torch.no_grad():
            canonical = all_canonical(topo, self.parts)
            posed = pose_canonical(canonical, self.transforms(instance))
        return [PartMesh(vertices=posed[i], faces=topo.faces) for i in range(posed.shape[0])]

    def save(self, path) -> None:
        tensors = {
            "scales": self.scales,
            "rest_pose": self.rest_pose,
            "poses": self.poses,
            "codes": self.parts.codes,
            "cam_rotation": torch.stack([c.rotation for c in self.cameras]),
            "cam_translation": torch.stack([c.translation for c in self.cameras]),
            "q": self.q.q,
            "q_count": self.q.count,
            "part_map": np.asarray(self.part_map.clusters, dtype=np.int32),
        }
        for i, mlp in enumerate(self.parts.deform):
            tensors.update(mlp.named_tensors(f"deform.{i}."))
        if self.parts.prior is not None:
            tensors.update(self.parts.prior.named_tensors("prior."))
        meta = {
            "skeleton": spec_to_dict(
                spec_from_dict(
                    {
                        "joints": [
                            {
                                "name": n,
                                "parent": None if p < 0 else int(p),
                                "rest": self.skeleton.rest_joints[i].tolist(),
                            }
                            for i, (n, p) in enumerate(
                                zip(self.skeleton.joint_names, self.skeleton.parents)
                            )
                        ],
                        "symmetry_pairs": self.skeleton.symmetry_pairs,
                        "leg_bones": self.skeleton.leg_bones,
                        "part_names": self.skeleton.part_names,
                    }
                )
            ),
            "nu": self.topo.nu,
            "nv": self.topo.nv,
            "focal": self.cameras[0].focal,
            "image_size": list(self.cameras[0].size),
            "has_prior": self.parts.prior is not None,
            "latent_dim": self.parts.latent_dim,
            "config": self.config.to_dict(),
        }
        bundleio.save_bundle(path, tensors, meta)

    @staticmethod
    def load(path) -> "FitResult":
        tensors, meta = bundleio.load_bundle(path)
        tt = {k: torch.from_numpy(v) for k, v in tensors.items() if v.dtype != np.int32}
        skeleton = build_skeleton(spec_from_dict(meta["skeleton"]))
        topo = make_sphere(int(meta["nu"]), int(meta["nv"]))
        b = skeleton.num_bones
        deform = [mlp_from_tensors(tt, f"deform.{i}.") for i in range(b)]
        prior = mlp_from_tensors(tt, "prior.") if meta.get("has_prior") else None
        cams = []
        size = tuple(meta["image_size"])
        for j in range(tt["poses"].shape[0]):
            cams.append(
                Camera(
                    rotation=tt["cam_rotation"][j].clone(),
                    translation=tt["cam_translation"][j].clone(),
                    focal=float(meta["focal"]),
                    size=size,
                )
            )
        config = FitConfig.from_dict(meta.get("config", {})) if meta.get("config") else FitConfig()
        part_map = PartClusterMap(
            clusters=tensors["part_map"].astype(np.int64), part_names=skeleton.part_names
        )
        return FitResult(
            skeleton=skeleton,
            topo=topo,
            scales=tt["scales"],
            rest_pose=tt["rest_pose"],
            parts=PartSet(codes=tt["codes"], deform=deform, prior=prior),
            cameras=cams,
            poses=tt["poses"],
            q=VertexFeatures(q=tt["q"], count=tt["q_count"].to(torch.long)),
            part_map=part_map,
            config=config,
            loss_history=[],
        )


@dataclass
class Preprocessed:
    ensemble: FeatureEnsemble
    clusters: ClusterModel
    part_map: PartClusterMap
    masks_feat: torch.Tensor  # (n, hf, wf) pseudo-silhouettes on the feature grid
    masks_render: torch.Tensor  # (n, h, w) nearest-upsampled for the mask loss


def preprocess(
    config: FitConfig, skeleton: Skeleton, ensemble: FeatureEnsemble | None = None
) -> Preprocessed:
    ens = ensemble if ensemble is not None else load_ensemble(config.ensemble)
    if config.pca_dim is not None and config.pca_dim < ens.feat_dim:
        ens = pca_reduce(ens, config.pca_dim)
    ens = normalize_features(ens)
    clusters = kmeans(ens, c=config.clusters, seed=config.seed)
    if config.part_map:
        part_map = PartClusterMap.from_json(config.part_map, skeleton.part_names)
    else:
        part_map = map_parts_heuristic(clusters, skeleton)
    render_size = config.render_size or ens.image_size or ens.grid_size
    masks_feat = torch.stack(
        [pseudo_silhouette(ens, clusters, j) for j in range(ens.n)]
    )
    masks_render = torch.stack(
        [pseudo_silhouette(ens, clusters, j, out_size=tuple(render_size)) for j in range(ens.n)]
    )
    return Preprocessed(
        ensemble=ens,
        clusters=clusters,
        part_map=part_map,
        masks_feat=masks_feat,
        masks_render=masks_render,
    )


def init_cameras(
    config: FitConfig, skeleton: Skeleton, n: int, size: tuple[int, int]
) -> list[Camera]:
    """Azimuths spread uniformly over the circle; distance set so the rest
    skeleton roughly fills the frame."""
    target = skeleton.rest_joints.mean(dim=0)
    dist = default_distance(skeleton, config.fov_deg, config.camera_fill)
    cams = []
    for j in range(n):
        cams.append(
            look_at_camera(
                360.0 * j / n,
                config.camera_elevation_deg,
                dist,
                target,
                size,
                fov_deg=config.fov_deg,
            )
        )
    return cams


def aligned_ellipsoid(
    topo: SphereTopology, direction: torch.Tensor, half_length: float, thickness: float
) -> torch.Tensor:
    """Slim ellipsoid surface elongated along ``direction``, in bone-length
    units, sampled on the shared grid."""
    up = torch.tensor([0.0, 1.0, 0.0])
    alt = torch.tensor([0.0, 0.0, 1.0])
    ref = alt if abs(float(direction @ up)) > 0.9 else up
    n1 = torch.cross(ref, direction, dim=0)
    n1 = n1 / torch.linalg.norm(n1)
    n2 = torch.cross(direction, n1, dim=0)
    u = topo.vertices
    return half_length * u[:, 1:2] * direction + thickness * (
        u[:, 0:1] * n1 + u[:, 2:3] * n2
    )


class _FitState:
    """Mutable optimization state shared by the driver helpers."""

    def __init__(self, config: FitConfig, skeleton: Skeleton, topo: SphereTopology, n: int,
                 size: tuple[int, int]):
        b = skeleton.num_bones
        gen = _generator(config.seed, 0xC0DE)
        if config.use_part_prior and config.prior:
            from .prior import encode, load_vae

            vae = load_vae(config.prior)
            prior = vae.decoder.requires_grad_(False)
            latent_dim = vae.latent_dim
            if config.code_init == "ellipsoid":
                # seed each part at a slim shape along its rest bone, via
                # the prior's own encoder
                dirs = skeleton.rest_bone_vectors / skeleton.rest_bone_lengths.unsqueeze(1)
                targets = torch.stack(
                    [
                        aligned_ellipsoid(
                            topo, dirs[i], config.init_half_length, config.init_thickness
                        )
                        for i in range(b)
                    ]
                )
                with torch.no_grad():
                    codes, _ = encode(vae, targets)
                self.codes = codes.detach().clone()
            else:
                self.codes = torch.zeros(b, latent_dim)
        else:
            prior, latent_dim = None, 1
            self.codes = torch.zeros(b, latent_dim)
        self.prior = prior
        self.deform = [
            init_mlp(36, 3, hidden=config_hidden(prior), generator=gen, zero_final=True)
            for _ in range(b)
        ]
        self.log_scales = torch.zeros(b)
        self.rest_pose = torch.zeros(b, 3)
        self.poses = torch.zeros(n, b, 3)
        self.cameras = init_cameras(config, skeleton, n, size)

    def part_set(self) -> PartSet:
        return PartSet(codes=self.codes, deform=self.deform, prior=self.prior)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)


def config_hidden(prior: MlpParams | None) -> int:
    """Deformation MLP width follows the prior decoder when one is loaded."""
    if prior is None:
        return 256
    return prior.weights[0].shape[0]


def _build_groups(state: _FitState, config: FitConfig) -> list[ParamGroup]:
    cam_params = []
    for cam in state.cameras:
        cam_params.extend([cam.rotation, cam.translation])
    deform_params = []
    for mlp in state.deform:
        deform_params.extend(mlp.parameters())
    groups = [
        ParamGroup("camera", cam_params, lr=config.lr_camera),
        ParamGroup("pose", [state.poses, state.rest_pose], lr=config.lr_pose),
        ParamGroup("scales", [state.log_scales], lr=config.lr_scales),
        ParamGroup("codes", [state.codes], lr=config.lr_codes),
        ParamGroup("deform", deform_params, lr=config.lr_deform),
    ]
    return groups


def optimize_ensemble(
    config: FitConfig,
    ensemble: FeatureEnsemble | None = None,
    progress: bool = False,
) -> FitResult:
    """Run preprocessing and the full alternating optimization."""
    if ensemble is None:
        config.validate()
    skeleton = build_skeleton(load_template(config.skeleton))
    topo = make_sphere(config.nu, config.nv)
    try:
        pre = preprocess(config, skeleton, ensemble)
    except Exception as exc:
        raise RuntimeError(f"preprocessing failed: {exc}") from exc
    ens = pre.ensemble
    n = ens.n
    b = skeleton.num_bones
    m = topo.num_vertices
    render_size = tuple(pre.masks_render.shape[1:])

    state = _FitState(config, skeleton, topo, n, render_size)
    q = init_vertex_features(pre.part_map, pre.clusters, topo)
    groups = _build_groups(state, config)
    opt = Adam(groups)
    sched = config.schedule_config()

    # foreground pixel tables per instance, on the feature grid
    hf, wf = ens.grid_size
    fg_coords, fg_feats = [], []
    for j in range(n):
        ii, jj = torch.nonzero(pre.masks_feat[j] > 0.5, as_tuple=True)
        coords = torch.stack([(jj.float() + 0.5) / wf, (ii.float() + 0.5) / hf], dim=1)
        fg_coords.append(coords)
        fg_feats.append(ens.features[j][ii, jj])

    history: list[dict] = []
    leg_bones = skeleton.leg_bones
    last_terms: list[LossTerms] = []

    def objective(iteration: int) -> torch.Tensor:
        jgen = _generator(config.seed, iteration, 0x11)
        canonical = all_canonical(
            topo, state.part_set(), jitter_sigma=config.jitter, generator=jgen
        )
        scales = state.scales()
        mask_total = torch.zeros(())
        sem_total = torch.zeros(())
        for j in range(n):
            tf = forward_kinematics(skeleton, state.poses[j], scales)
            posed = pose_canonical(canonical, tf)
            meshes = [PartMesh(vertices=posed[i], faces=topo.faces) for i in range(b)]
            rendered = soft_silhouette(
                meshes, state.cameras[j], sigma=config.sigma, cutoff_eps=config.soft_cutoff
            )
            mask_total = mask_total + silhouette_loss(rendered, pre.masks_render[j])
            if config.weights.sem > 0 and fg_coords[j].shape[0] > 0:
                with torch.no_grad():
                    detached = [PartMesh(vertices=posed[i].detach(), faces=topo.faces) for i in range(b)]
                    vis = hard_rasterize(detached, state.cameras[j], vis_eps=config.vis_eps).vertex_visible.reshape(-1)
                vis_idx = torch.nonzero(vis, as_tuple=False).squeeze(1)
                if vis_idx.numel() == 0:
                    continue
                pgen = _generator(config.seed, iteration, j, 0x22)
                psel = stratified_subsample(fg_coords[j].shape[0], config.max_pixels, pgen)
                vgen = _generator(config.seed, iteration, j, 0x33)
                vsel = vis_idx[stratified_subsample(vis_idx.numel(), config.max_points, vgen)]
                flat = posed.reshape(b * m, 3)
                coords, _, _ = project(state.cameras[j], flat[vsel])
                sem_total = sem_total + semantic_chamfer(
                    fg_coords[j][psel],
                    fg_feats[j][psel],
                    coords,
                    q.q[vsel],
                    config.weights.alpha,
                    point_feat_valid=q.count[vsel] > 0,
                )
        lap = torch.stack([laplacian_loss(canonical[i], topo) for i in range(b)]).mean()
        nrm = torch.stack([normal_loss(canonical[i], topo) for i in range(b)]).mean()
        terms = LossTerms(
            mask=mask_total,
            sem=sem_total,
            pose=pose_prior_loss(state.poses, state.rest_pose),
            ang=angle_loss(state.poses, leg_bones),
            lap=lap,
            norm=nrm,
        )
        last_terms.clear()
        last_terms.append(terms)
        return total_objective(terms, config.weights)

    def run_e_step() -> None:
        nonlocal q
        with torch.no_grad():
            canonical = all_canonical(topo, state.part_set())
            scales = state.scales()
            positions = torch.zeros(n, b * m, 3)
            visibility = torch.zeros(n, b * m, dtype=torch.bool)
            for j in range(n):
                tf = forward_kinematics(skeleton, state.poses[j], scales)
                posed = pose_canonical(canonical, tf)
                positions[j] = posed.reshape(b * m, 3)
                meshes = [PartMesh(vertices=posed[i], faces=topo.faces) for i in range(b)]
                visibility[j] = hard_rasterize(
                    meshes, state.cameras[j], vis_eps=config.vis_eps
                ).vertex_visible.reshape(-1)
            q = e_step(positions, state.cameras, ens.features, visibility, previous=q)

    total_iters = sched.total_iterations
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot() -> FitResult:
        return FitResult(
            skeleton=skeleton,
            topo=topo,
            scales=state.scales().detach().clone(),
            rest_pose=state.rest_pose.detach().clone(),
            parts=PartSet(
                codes=state.codes.detach().clone(),
                deform=[mlp.clone() for mlp in state.deform],
                prior=state.prior,
            ),
            cameras=[
                Camera(
                    rotation=c.rotation.detach().clone(),
                    translation=c.translation.detach().clone(),
                    focal=c.focal,
                    size=c.size,
                )
                for c in state.cameras
            ],
            poses=state.poses.detach().clone(),
            q=q.clone(),
            part_map=pre.part_map,
            config=config,
            loss_history=list(history),
        )

    for it in range(total_iters):
        active, do_e = schedule(it, sched)
        opt.set_enabled(active)
        for g in groups:
            for p in g.params:
                p.requires_grad_(g.name in active)
        if do_e:
            run_e_step()
        try:
            grads = compute_gradients(lambda: objective(it), groups)
            opt.step(grads)
        except (ObjectiveError, GradientError) as exc:
            if out_dir:
                snapshot().save(out_dir / "last-good.ckpt")
            raise RuntimeError(f"optimization aborted at iteration {it}: {exc}") from exc
        terms = last_terms[0]
        row = {"iteration": it, **terms.as_dict()}
        w = config.weights
        row["total"] = (
            row["mask"]
            + w.sem * row["sem"]
            + w.pose * row["pose"]
            + w.ang * row["ang"]
            + w.lap * row["lap"]
            + w.norm * row["norm"]
        )
        history.append(row)
        if progress and (it % 50 == 0 or it == total_iters - 1):
            print(
                f"[optimize] it {it}/{total_iters} total={row['total']:.5f} "
                f"mask={row['mask']:.5f} sem={row['sem']:.4f}"
            )

    for g in groups:
        for p in g.params:
            p.requires_grad_(False)
    run_e_step()
    result = snapshot()
    if out_dir:
        result.save(out_dir / "result.ckpt")
        write_loss_csv(out_dir / "loss_curves.csv", history)
    return result


def write_loss_csv(path, history: list[dict]) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def sample_texture(
    result: FitResult, instance: int, image: np.ndarray | torch.Tensor
) -> torch.Tensor:
    """Per-vertex RGB in [0, 1], shape (b, m, 3).

    Visible vertices sample the image bilinearly at their projection;
    occluded ones copy their mirror partner when it is visible, and fall
    back to the nearest visible vertex (same part first, then anywhere).
    """
    if image is None:
        raise ValueError("instance has no RGB image to sample")
    img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if img.max() > 1.5:
        img = img / 255.0
    h, w = img.shape[0], img.shape[1]
    meshes = result.meshes(instance)
    cam = result.cameras[instance]
    cam_img = Camera(
        rotation=cam.rotation, translation=cam.translation, focal=cam.focal, size=(h, w)
    )
    buf = hard_rasterize(meshes, cam_img, vis_eps=result.config.vis_eps)
    b = len(meshes)
    m = meshes[0].vertices.shape[0]
    verts = torch.cat([mesh.vertices for mesh in meshes], dim=0)
    coords, _, _ = project(cam_img, verts)
    colors = torch.zeros(b * m, 3)
    vis = buf.vertex_visible.reshape(-1).clone()
    vis_idx = torch.nonzero(vis, as_tuple=False).squeeze(1)
    if vis_idx.numel() == 0:
        raise ValueError("no visible vertices to sample texture from")
    colors[vis_idx] = bilinear_sample(img, coords[vis_idx])

    mirror = result.topo.mirror_index
    if mirror is not None:
        offs = torch.arange(b).repeat_interleave(m) * m
        mirror_flat = mirror.repeat(b) + offs
        fill = (~vis) & vis[mirror_flat]
        colors[fill] = colors[mirror_flat[fill]]
        vis = vis | fill

    missing = torch.nonzero(~vis, as_tuple=False).squeeze(1)
    if missing.numel() > 0:
        have = torch.nonzero(vis, as_tuple=False).squeeze(1)
        part_of = torch.arange(b).repeat_interleave(m)
        for idx in missing.tolist():
            same = have[part_of[have] == part_of[idx]]
            pool = same if same.numel() > 0 else have
            d = torch.linalg.norm(verts[pool] - verts[idx], dim=1)
            colors[idx] = colors[pool[int(torch.argmin(d))]]
    return colors.reshape(b, m, 3)


def repose(result: FitResult, new_pose: torch.Tensor) -> list[PartMesh]:
    """Reassemble the shared shape under an arbitrary pose."""
    if new_pose.shape != (result.skeleton.num_bones, 3):
        raise ValueError("pose must be (b, 3)")
    with torch.no_grad():
        canonical = all_canonical(result.topo, result.parts)
        tf = forward_kinematics(result.skeleton, new_pose, result.scales)
        posed = pose_canonical(canonical, tf)
    return [PartMesh(vertices=posed[i], faces=result.topo.faces) for i in range(posed.shape[0])]


def transfer_texture(
    src_result: FitResult, src_colors: torch.Tensor, dst_result: FitResult
) -> torch.Tensor:
    """Copy per-vertex colors across results sharing skeleton and topology."""
    if (src_result.topo.nu, src_result.topo.nv) != (dst_result.topo.nu, dst_result.topo.nv):
        raise ValueError("sphere topologies differ; dense correspondence unavailable")
    if src_result.skeleton.part_names != dst_result.skeleton.part_names:
        raise ValueError("skeleton templates differ")
    expect = (dst_result.parts.num_parts, dst_result.topo.num_vertices, 3)
    if tuple(src_colors.shape) != expect:
        raise ValueError(f"colors shape {tuple(src_colors.shape)} != {expect}")
    return src_colors.clone()


def export_meshes(
    result: FitResult,
    instance: int,
    out_dir,
    formats: tuple[str, ...] = ("obj", "ply"),
    colors: torch.Tensor | None = None,
    overlays: bool = False,
    stem: str | None = None,
) -> list[Path]:
    """Write OBJ (part-grouped) and/or PLY (vertex colors) plus optional
    silhouette / part-index overlay PNGs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"instance_{instance}"
    meshes = result.meshes(instance)
    m = result.topo.num_vertices
    written: list[Path] = []

    if "obj" in formats:
        path = out / f"{stem}.obj"
        with open(path, "w") as fh:
            fh.write("# articulated part-based reconstruction\n")
            for mesh in meshes:
                for v in mesh.vertices.tolist():
                    fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
            for i, mesh in enumerate(meshes):
                fh.write(f"g {result.skeleton.part_names[i]}\n")
                for f in (mesh.faces + i * m + 1).tolist():
                    fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
        written.append(path)

    if "ply" in formats:
        if colors is None:
            colors = torch.full((len(meshes), m, 3), 0.7)
        rgb = (colors.reshape(-1, 3).clamp(0, 1) * 255).round().to(torch.uint8)
        path = out / f"{stem}.ply"
        verts = torch.cat([mesh.vertices for mesh in meshes], dim=0)
        faces = torch.cat([mesh.faces + i * m for i, mesh in enumerate(meshes)], dim=0)
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {verts.shape[0]}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
            fh.write(f"element face {faces.shape[0]}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            for v, c in zip(verts.tolist(), rgb.tolist()):
                fh.write(f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]} {c[1]} {c[2]}\n")
            for f in faces.tolist():
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        written.append(path)

    if overlays:
        from PIL import Image

        buf = hard_rasterize(meshes, result.cameras[instance], vis_eps=result.config.vis_eps)
        sil = (buf.silhouette.numpy() * 255).astype(np.uint8)
        sil_path = out / f"{stem}_silhouette.png"
        Image.fromarray(sil).save(sil_path)
        written.append(sil_path)
        lab = buf.part_index.numpy()
        img = np.zeros((*lab.shape, 3), dtype=np.uint8)
        img[lab >= 0] = PART_PALETTE[lab[lab >= 0] % len(PART_PALETTE)]
        part_path = out / f"{stem}_parts.png"
        Image.fromarray(img).save(part_path)
        written.append(part_path)
    return written


def load_obj_counts(path) -> tuple[int, int]:
    """Vertex and face counts of an OBJ file (round-trip checks)."""
    nv = nf = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                nv += 1
            elif line.startswith("f "):
                nf += 1
    return nv, nf
