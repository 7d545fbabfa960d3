"""Skeleton definition, bone-length scaling, and forward kinematics.

A skeleton is a single-rooted tree of 3D joints. Every non-root joint
defines one bone (from its parent joint to itself), so ``b = p - 1``.
Rest joint positions live in the canonical unit cube with +x right,
+y up, +z out; the figure faces +z.

Per-bone pose is stored as XYZ intrinsic Euler angles relative to the
parent bone's frame; forward kinematics composes them down the tree into
global bone rotations, joint positions, and bone centroids/lengths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch


class SkeletonError(ValueError):
    """Raised for malformed skeleton specifications."""


@dataclass(frozen=True)
class SkeletonSpec:
    """Raw skeleton description as loaded from a template file."""

    joint_names: list[str]
    parents: list[int | None]
    rest_positions: np.ndarray  # (p, 3) in [0, 1]^3
    symmetry_pairs: list[tuple[int, int]] = field(default_factory=list)
    leg_bones: list[int] = field(default_factory=list)
    part_names: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Skeleton:
    """Validated skeleton with topologically ordered bones.

    ``bones[i] = (proximal_joint, distal_joint)``; bone ``i`` is attached to
    ``bone_parents[i]`` (-1 when the proximal joint is the root). Parents
    always precede children in bone order.
    """

    joint_names: list[str]
    parents: np.ndarray  # (p,), -1 for the root
    rest_joints: torch.Tensor  # (p, 3) float32
    bones: np.ndarray  # (b, 2) int
    bone_parents: np.ndarray  # (b,) int, -1 when attached to the root
    part_names: list[str]
    symmetry_pairs: list[tuple[int, int]]
    leg_bones: list[int]

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_bones(self) -> int:
        return len(self.bones)

    @property
    def rest_bone_vectors(self) -> torch.Tensor:
        """(b, 3) rest vectors from proximal to distal joint."""
        return self.rest_joints[self.bones[:, 1]] - self.rest_joints[self.bones[:, 0]]

    @property
    def rest_bone_lengths(self) -> torch.Tensor:
        return torch.linalg.norm(self.rest_bone_vectors, dim=1)

    def part_index(self, name: str) -> int:
        return self.part_names.index(name)


@dataclass
class BoneTransforms:
    """Global per-bone transforms produced by forward kinematics."""

    rotations: torch.Tensor  # (b, 3, 3)
    centroids: torch.Tensor  # (b, 3)
    lengths: torch.Tensor  # (b,)
    joints: torch.Tensor  # (p, 3) posed joint positions


def euler_to_matrix(angles: torch.Tensor) -> torch.Tensor:
    """XYZ intrinsic Euler angles (..., 3) -> rotation matrices (..., 3, 3)."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx = torch.cos(ax), torch.sin(ax)
    cy, sy = torch.cos(ay), torch.sin(ay)
    cz, sz = torch.cos(az), torch.sin(az)
    one = torch.ones_like(cx)
    zero = torch.zeros_like(cx)
    rx = torch.stack(
        [one, zero, zero, zero, cx, -sx, zero, sx, cx], dim=-1
    ).reshape(*ax.shape, 3, 3)
    ry = torch.stack(
        [cy, zero, sy, zero, one, zero, -sy, zero, cy], dim=-1
    ).reshape(*ax.shape, 3, 3)
    rz = torch.stack(
        [cz, -sz, zero, sz, cz, zero, zero, zero, one], dim=-1
    ).reshape(*ax.shape, 3, 3)
    return rx @ ry @ rz


def build_skeleton(spec: SkeletonSpec) -> Skeleton:
    """Validate a spec and derive the topological bone ordering.

    Raises :class:`SkeletonError` on cycles, multiple roots, out-of-cube
    rest positions, or part-name count mismatches.
    """
    p = len(spec.joint_names)
    if len(spec.parents) != p or spec.rest_positions.shape != (p, 3):
        raise SkeletonError("joint_names, parents, and rest_positions disagree on p")
    roots = [i for i, par in enumerate(spec.parents) if par is None or par < 0]
    if len(roots) != 1:
        raise SkeletonError(f"expected exactly one root joint, found {len(roots)}")
    rest = np.asarray(spec.rest_positions, dtype=np.float64)
    if rest.min() < -1e-9 or rest.max() > 1.0 + 1e-9:
        raise SkeletonError("rest positions must lie in the unit cube")

    parents = np.array(
        [-1 if q is None else int(q) for q in spec.parents], dtype=np.int64
    )
    for j, par in enumerate(parents):
        if par == j:
            raise SkeletonError(f"joint {spec.joint_names[j]} parents itself")
        if par >= p:
            raise SkeletonError(f"joint {spec.joint_names[j]} has out-of-range parent")

    # Walk each joint to the root; revisiting a joint on the way is a cycle.
    for j in range(p):
        seen = set()
        cur = j
        while parents[cur] != -1:
            if cur in seen:
                raise SkeletonError("parent graph contains a cycle")
            seen.add(cur)
            cur = parents[cur]

    order: list[int] = []
    pending = [roots[0]]
    children: dict[int, list[int]] = {j: [] for j in range(p)}
    for j, par in enumerate(parents):
        if par >= 0:
            children[par].append(j)
    while pending:
        j = pending.pop(0)
        order.append(j)
        pending.extend(children[j])
    if len(order) != p:
        raise SkeletonError("parent graph is not a single connected tree")

    bone_joints = [j for j in order if parents[j] != -1]
    b = len(bone_joints)
    if b != p - 1:
        raise SkeletonError(f"bone count {b} != p - 1 = {p - 1}")
    if spec.part_names and len(spec.part_names) != b:
        raise SkeletonError("part_names length must equal the bone count")

    bones = np.array([(parents[j], j) for j in bone_joints], dtype=np.int64)
    joint_to_bone = {j: i for i, j in enumerate(bone_joints)}
    bone_parents = np.array(
        [joint_to_bone.get(int(prox), -1) for prox, _ in bones], dtype=np.int64
    )
    part_names = list(spec.part_names) or [
        f"part_{spec.joint_names[j]}" for j in bone_joints
    ]
    for lo, hi in spec.symmetry_pairs:
        if not (0 <= lo < b and 0 <= hi < b):
            raise SkeletonError("symmetry pair references a missing bone")
    for i in spec.leg_bones:
        if not 0 <= i < b:
            raise SkeletonError("leg bone index out of range")

    return Skeleton(
        joint_names=list(spec.joint_names),
        parents=parents,
        rest_joints=torch.tensor(rest, dtype=torch.float32),
        bones=bones,
        bone_parents=bone_parents,
        part_names=part_names,
        symmetry_pairs=[(int(a), int(c)) for a, c in spec.symmetry_pairs],
        leg_bones=sorted(int(i) for i in spec.leg_bones),
    )


def resting_pose(skeleton: Skeleton) -> torch.Tensor:
    """All-zero Euler angles, shape (b, 3)."""
    return torch.zeros(skeleton.num_bones, 3)


def forward_kinematics(
    skeleton: Skeleton, pose: torch.Tensor, scales: torch.Tensor
) -> BoneTransforms:
    """Compose per-bone local rotations and length scales down the tree.

    ``pose`` is (b, 3) Euler angles, ``scales`` (b,) positive factors on the
    rest bone lengths. Scaling a bone translates all of its descendants
    along the (rotated) bone direction. Pure function of its inputs.
    """
    b = skeleton.num_bones
    if pose.shape != (b, 3):
        raise ValueError(f"pose shape {tuple(pose.shape)} != ({b}, 3)")
    if scales.shape != (b,):
        raise ValueError(f"scales shape {tuple(scales.shape)} != ({b},)")

    local = euler_to_matrix(pose)
    rest_vec = skeleton.rest_bone_vectors.to(pose.dtype)
    rest_joints = skeleton.rest_joints.to(pose.dtype)

    rotations: list[torch.Tensor] = [None] * b  # type: ignore[list-item]
    joint_pos: list[torch.Tensor] = [None] * skeleton.num_joints  # type: ignore[list-item]
    root = int(np.where(skeleton.parents == -1)[0][0])
    joint_pos[root] = rest_joints[root]

    for i in range(b):
        parent_bone = skeleton.bone_parents[i]
        parent_rot = (
            rotations[parent_bone]
            if parent_bone >= 0
            else torch.eye(3, dtype=pose.dtype)
        )
        rot = parent_rot @ local[i]
        rotations[i] = rot
        prox, dist = skeleton.bones[i]
        joint_pos[dist] = joint_pos[prox] + scales[i] * (rot @ rest_vec[i])

    joints = torch.stack(joint_pos)
    prox_pos = joints[skeleton.bones[:, 0]]
    dist_pos = joints[skeleton.bones[:, 1]]
    return BoneTransforms(
        rotations=torch.stack(rotations),
        centroids=0.5 * (prox_pos + dist_pos),
        lengths=skeleton.rest_bone_lengths.to(pose.dtype) * scales,
        joints=joints,
    )


def spec_from_dict(data: dict) -> SkeletonSpec:
    joints = data["joints"]
    return SkeletonSpec(
        joint_names=[j["name"] for j in joints],
        parents=[j["parent"] for j in joints],
        rest_positions=np.array([j["rest"] for j in joints], dtype=np.float64),
        symmetry_pairs=[tuple(pair) for pair in data.get("symmetry_pairs", [])],
        leg_bones=list(data.get("leg_bones", [])),
        part_names=list(data.get("part_names", [])),
    )


def load_skeleton_spec(path) -> SkeletonSpec:
    """Load a skeleton spec from a JSON file."""
    with open(path) as fh:
        return spec_from_dict(json.load(fh))


def load_template(name: str) -> SkeletonSpec:
    """Load a shipped template (``quadruped`` or ``biped``) or a JSON path."""
    candidate = Path(name)
    if candidate.suffix == ".json" and candidate.exists():
        return load_skeleton_spec(candidate)
    ref = resources.files("partfit.templates").joinpath(f"{name}.json")
    if not ref.is_file():
        raise SkeletonError(f"unknown skeleton template {name!r}")
    return spec_from_dict(json.loads(ref.read_text()))


def spec_to_dict(spec: SkeletonSpec) -> dict:
    return {
        "joints": [
            {
                "name": n,
                "parent": None if par is None or par < 0 else int(par),
                "rest": [float(x) for x in r],
            }
            for n, par, r in zip(spec.joint_names, spec.parents, spec.rest_positions)
        ],
        "symmetry_pairs": [[int(a), int(b)] for a, b in spec.symmetry_pairs],
        "leg_bones": [int(i) for i in spec.leg_bones],
        "part_names": list(spec.part_names),
    }
