import numpy as np
import pytest
import torch

from partfit.losses import (
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
from partfit.parts import SphereTopology, make_sphere
from partfit.render import Camera, focal_from_fov


def brute_force_chamfer(px, pf, vx, vf, alpha, valid=None):
    """Independent per-pair evaluation in float32 numpy, sequential over
    feature coordinates, mirroring IEEE op order of the production path."""
    px = px.numpy().astype(np.float32)
    pf = pf.numpy().astype(np.float32)
    vx = vx.detach().numpy().astype(np.float32)
    vf = vf.numpy().astype(np.float32)
    a32 = np.float32(alpha)
    n, m = px.shape[0], vx.shape[0]
    d = np.zeros((n, m), dtype=np.float32)
    for i in range(n):
        for j in range(m):
            dx = np.float32(vx[j, 0]) - np.float32(px[i, 0])
            dy = np.float32(vx[j, 1]) - np.float32(px[i, 1])
            geo = dx * dx + dy * dy
            sem = np.float32(0.0)
            for k in range(pf.shape[1]):
                dq = np.float32(vf[j, k]) - np.float32(pf[i, k])
                sem = sem + dq * dq
            if valid is not None and not bool(valid[j]):
                sem = np.float32(0.0)
            d[i, j] = geo + a32 * sem
    row_min = torch.from_numpy(d.min(axis=1))
    col_min = torch.from_numpy(d.min(axis=0))
    return row_min.sum() + col_min.sum()


class TestSilhouetteLoss:
    def test_identical_maps_give_zero(self):
        m = torch.rand(8, 8)
        assert float(silhouette_loss(m, m)) == 0.0

    def test_mean_squared_convention(self):
        ones = torch.ones(2, 2)
        zeros = torch.zeros(2, 2)
        assert float(silhouette_loss(ones, zeros)) == 1.0

    def test_gradient_is_scaled_residual(self):
        rendered = torch.rand(4, 4, requires_grad=True)
        gt = torch.rand(4, 4)
        silhouette_loss(rendered, gt).backward()
        expected = 2 * (rendered.detach() - gt) / 16
        assert torch.allclose(rendered.grad, expected, atol=1e-7)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            silhouette_loss(torch.zeros(4, 4), torch.zeros(5, 4))


def _lookat_cam(size=(16, 16)):
    return Camera(
        rotation=torch.zeros(3),
        translation=torch.tensor([0.0, 0.0, 2.0]),
        focal=focal_from_fov(),
        size=size,
    )


class TestEStep:
    def test_constant_region_gives_normalized_feature(self):
        cam = _lookat_cam()
        feat = torch.zeros(1, 16, 16, 3)
        feat[..., 0] = 2.0  # constant feature, non-unit norm
        pos = torch.zeros(1, 5, 3)
        vis = torch.ones(1, 5, dtype=torch.bool)
        q = e_step(pos, [cam], feat, vis)
        assert torch.allclose(q.q, torch.tensor([1.0, 0.0, 0.0]).expand(5, 3), atol=1e-6)
        assert bool((q.count == 1).all())

    def test_two_view_average(self):
        cam = _lookat_cam()
        f1 = torch.zeros(1, 16, 16, 2)
        f1[..., 0] = 1.0
        f2 = torch.zeros(1, 16, 16, 2)
        f2[..., 1] = 1.0
        feats = torch.cat([f1, f2])
        pos = torch.zeros(2, 1, 3)
        vis = torch.ones(2, 1, dtype=torch.bool)
        q = e_step(pos, [cam, cam], feats, vis)
        # mean of (1,0) and (0,1), renormalized
        expected = torch.tensor([[1.0, 1.0]]) / np.sqrt(2.0)
        assert torch.allclose(q.q, expected, atol=1e-6)
        assert int(q.count[0]) == 2

    def test_occluded_vertex_keeps_previous_row(self):
        cam = _lookat_cam()
        feat = torch.rand(1, 16, 16, 3)
        pos = torch.zeros(1, 2, 3)
        vis = torch.tensor([[True, False]])
        prev = VertexFeatures(q=torch.tensor([[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]]), count=torch.tensor([1, 7]))
        q = e_step(pos, [cam], feat, vis, previous=prev)
        assert torch.equal(q.q[1], prev.q[1])
        assert int(q.count[1]) == 7

    def test_idempotent(self):
        gen = torch.Generator().manual_seed(0)
        cam = _lookat_cam()
        feat = torch.rand(2, 16, 16, 4, generator=gen)
        pos = torch.rand(2, 9, 3, generator=gen) * 0.4 - 0.2
        vis = torch.rand(2, 9, generator=gen) > 0.3
        q1 = e_step(pos, [cam, cam], feat, vis)
        q2 = e_step(pos, [cam, cam], feat, vis, previous=q1)
        assert torch.equal(q1.q, q2.q)
        assert torch.equal(q1.count, q2.count)

    def test_rows_unit_norm(self):
        gen = torch.Generator().manual_seed(1)
        cam = _lookat_cam()
        feat = torch.rand(2, 16, 16, 4, generator=gen) + 0.1
        pos = torch.rand(2, 9, 3, generator=gen) * 0.4 - 0.2
        vis = torch.rand(2, 9, generator=gen) > 0.3
        q = e_step(pos, [cam, cam], feat, vis)
        seen = q.count > 0
        norms = torch.linalg.norm(q.q[seen], dim=1)
        assert float((norms - 1).abs().max()) < 1e-6


class TestSemanticChamfer:
    def test_coincident_pair_is_zero(self):
        px = torch.tensor([[0.5, 0.5]])
        pf = torch.tensor([[1.0, 0.0]])
        vx = torch.tensor([[0.5, 0.5]])
        vf = torch.tensor([[1.0, 0.0]])
        assert float(semantic_chamfer(px, pf, vx, vf, 0.1)) == 0.0

    def test_alpha_zero_reduces_to_plane_chamfer(self):
        gen = torch.Generator().manual_seed(2)
        px = torch.rand(9, 2, generator=gen)
        vx = torch.rand(6, 2, generator=gen)
        pf = torch.rand(9, 4, generator=gen)
        vf = torch.rand(6, 4, generator=gen)
        got = semantic_chamfer(px, pf, vx, vf, 0.0)
        want = brute_force_chamfer(px, pf, vx, vf, 0.0)
        assert torch.equal(got, want)

    def test_matches_brute_force_bitwise(self):
        gen = torch.Generator().manual_seed(3)
        for trial in range(20):
            n = int(torch.randint(1, 50, (1,), generator=gen))
            m = int(torch.randint(1, 50, (1,), generator=gen))
            f = int(torch.randint(1, 8, (1,), generator=gen))
            px = torch.rand(n, 2, generator=gen)
            vx = torch.rand(m, 2, generator=gen)
            pf = torch.randn(n, f, generator=gen)
            vf = torch.randn(m, f, generator=gen)
            valid = torch.rand(m, generator=gen) > 0.2
            got = semantic_chamfer(px, pf, vx, vf, 0.1, point_feat_valid=valid)
            want = brute_force_chamfer(px, pf, vx, vf, 0.1, valid=valid)
            assert torch.equal(got, want), trial

    def test_empty_sides_rejected(self):
        with pytest.raises(ValueError):
            semantic_chamfer(torch.zeros(0, 2), torch.zeros(0, 2), torch.zeros(3, 2), torch.zeros(3, 2), 0.1)
        with pytest.raises(ValueError):
            semantic_chamfer(torch.zeros(3, 2), torch.zeros(3, 2), torch.zeros(0, 2), torch.zeros(0, 2), 0.1)

    def test_gradients_flow_to_points_only(self):
        gen = torch.Generator().manual_seed(4)
        px = torch.rand(5, 2, generator=gen)
        pf = torch.rand(5, 3, generator=gen)
        vx = torch.rand(4, 2, generator=gen).requires_grad_(True)
        vf = torch.rand(4, 3, generator=gen)
        semantic_chamfer(px, pf, vx, vf, 0.1).backward()
        assert vx.grad is not None
        assert torch.isfinite(vx.grad).all()


class TestPosePriors:
    def test_rest_pose_zero(self):
        rest = torch.zeros(4, 3)
        poses = torch.zeros(2, 4, 3)
        assert float(pose_prior_loss(poses, rest)) == 0.0

    def test_single_axis_offset(self):
        rest = torch.zeros(4, 3)
        poses = torch.zeros(1, 4, 3)
        poses[0, 2, 1] = 0.3
        assert abs(float(pose_prior_loss(poses, rest)) - 0.09) < 1e-7

    def test_sums_over_instances(self):
        rest = torch.zeros(2, 3)
        poses = torch.zeros(2, 2, 3)
        poses[0, 0, 0] = 0.5
        poses[1, 1, 2] = 0.2
        assert abs(float(pose_prior_loss(poses, rest)) - (0.25 + 0.04)) < 1e-7


class TestAngleLoss:
    def test_x_axis_rotations_free(self):
        poses = torch.zeros(2, 5, 3)
        poses[..., 0] = 1.3
        assert float(angle_loss(poses, [1, 2])) == 0.0

    def test_single_sideways_rotation(self):
        poses = torch.zeros(1, 5, 3)
        poses[0, 2, 1] = 0.3
        assert abs(float(angle_loss(poses, [2])) - 0.09) < 1e-7

    def test_non_leg_bones_ignored(self):
        poses = torch.zeros(1, 5, 3)
        poses[0, 0] = torch.tensor([1.0, 1.0, 1.0])
        assert float(angle_loss(poses, [2, 3])) == 0.0


def brute_force_laplacian(verts, topo):
    v = verts.numpy()
    edges = topo.edges.numpy()
    nbrs = {i: [] for i in range(v.shape[0])}
    for a, b in edges:
        nbrs[int(a)].append(int(b))
        nbrs[int(b)].append(int(a))
    total = 0.0
    for i in range(v.shape[0]):
        mean = np.mean([v[j] for j in nbrs[i]], axis=0)
        total += float(((v[i] - mean) ** 2).sum())
    return total / v.shape[0]


class TestMeshRegularizers:
    def test_laplacian_matches_brute_force(self):
        topo = make_sphere(8, 5)
        gen = torch.Generator().manual_seed(5)
        verts = topo.vertices + 0.1 * torch.randn(topo.num_vertices, 3, generator=gen)
        got = float(laplacian_loss(verts, topo))
        want = brute_force_laplacian(verts, topo)
        assert abs(got - want) < 1e-6

    def test_sphere_shrinkage_value(self):
        topo = make_sphere(16, 8)
        got = float(laplacian_loss(topo.vertices, topo))
        want = brute_force_laplacian(topo.vertices, topo)
        assert abs(got - want) < 1e-7
        assert got > 0  # neighbor centroids sit strictly inside the sphere

    def test_spike_vertex_increment(self):
        topo = make_sphere(8, 5)
        base = topo.vertices.clone()
        spiked = base.clone()
        normal = base[3] / torch.linalg.norm(base[3])
        spiked[3] += 0.5 * normal
        got = float(laplacian_loss(spiked, topo))
        want = brute_force_laplacian(spiked, topo)
        assert abs(got - want) < 1e-6
        assert got > float(laplacian_loss(base, topo))

    def test_flat_grid_normal_loss_zero(self):
        # planar patch with consistent orientation: all face normals agree
        verts = torch.tensor(
            [[float(j), float(i), 0.0] for i in range(3) for j in range(3)]
        )
        faces = []
        for i in range(2):
            for j in range(2):
                a = i * 3 + j
                faces.append([a, a + 1, a + 4])
                faces.append([a, a + 4, a + 3])
        topo = SphereTopology(
            nu=0, nv=0, vertices=verts, faces=torch.tensor(faces, dtype=torch.long)
        )
        assert abs(float(normal_loss(verts, topo))) < 1e-7

    def test_normal_loss_positive_on_sphere(self):
        topo = make_sphere(8, 5)
        val = float(normal_loss(topo.vertices, topo))
        assert 0 < val < 0.5


class TestTotalObjective:
    def _terms(self, **overrides):
        base = {
            "mask": torch.tensor(0.3),
            "sem": torch.tensor(1.2),
            "pose": torch.tensor(0.5),
            "ang": torch.tensor(0.1),
            "lap": torch.tensor(0.02),
            "norm": torch.tensor(0.04),
        }
        base.update(overrides)
        return LossTerms(**base)

    def test_zero_weights_reduce_to_mask(self):
        w = LossWeights(sem=0, pose=0, ang=0, lap=0, norm=0)
        assert float(total_objective(self._terms(), w)) == pytest.approx(0.3)

    def test_linear_in_each_weight(self):
        terms = self._terms()
        base = LossWeights(sem=0, pose=0, ang=0, lap=0, norm=0)
        for name, term in [("sem", 1.2), ("pose", 0.5), ("ang", 0.1), ("lap", 0.02), ("norm", 0.04)]:
            w1 = LossWeights(**{**base.__dict__, name: 1.0})
            w2 = LossWeights(**{**base.__dict__, name: 2.0})
            v1 = float(total_objective(terms, w1))
            v2 = float(total_objective(terms, w2))
            assert v2 - v1 == pytest.approx(term, rel=1e-6)

    def test_nan_aborts_with_attribution(self):
        terms = self._terms(sem=torch.tensor(float("nan")))
        with pytest.raises(ObjectiveError, match="sem"):
            total_objective(terms, LossWeights())

    def test_non_negative(self):
        gen = torch.Generator().manual_seed(6)
        for _ in range(10):
            vals = torch.rand(6, generator=gen)
            terms = LossTerms(*[v for v in vals])
            assert float(total_objective(terms, LossWeights())) >= 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(sem=-0.1)
