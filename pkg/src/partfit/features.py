"""Feature-ensemble ingestion and 2D preprocessing.

An ensemble is a directory with a ``manifest.json`` plus raw per-instance
tensors, all little-endian float32:

    manifest.json      schema_version, dtype "f32-le", n, feature_shape
                       [hf, wf, f], saliency_shape [hf, wf], optional
                       image_size [h, w], mask_shape [h, w], and a
                       per-instance file table
    feat_<k>.bin       row-major hf x wf x f features
    sal_<k>.bin        hf x wf saliency in [0, 1]
    img_<k>.png        optional RGB image
    kp_<k>.json        optional named 2D keypoints with visibility flags
    mask_<k>.bin       optional evaluation mask, h x w

Preprocessing reduces features with PCA, clusters salient pixels with
k-means, thresholds feature distances into pseudo foreground silhouettes,
and maps 3D parts to 2D clusters (from a JSON file or by a height
heuristic) to initialize the per-vertex feature table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import VertexFeatures
from .parts import SphereTopology
from .skeleton import Skeleton

SCHEMA_VERSION = 1


class EnsembleError(RuntimeError):
    """Raised when an ensemble bundle fails validation."""


@dataclass
class KeypointSet:
    names: list[str]
    points: np.ndarray  # (K, 2) pixel coords (x, y)
    visible: np.ndarray  # (K,) bool


@dataclass
class FeatureEnsemble:
    features: torch.Tensor  # (n, hf, wf, f)
    saliency: torch.Tensor  # (n, hf, wf)
    images: list[np.ndarray | None]
    keypoints: list[KeypointSet | None]
    masks: torch.Tensor | None  # (n, h, w) when present
    image_size: tuple[int, int] | None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[-1]

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


def _read_raw(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise EnsembleError(f"missing tensor file: {path}")
    data = np.fromfile(path, dtype="<f4")
    expect = int(np.prod(shape))
    if data.size != expect:
        raise EnsembleError(f"{path}: expected {expect} floats, found {data.size}")
    return data.reshape(shape)


def load_ensemble(path) -> FeatureEnsemble:
    """Load and validate an ensemble directory."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise EnsembleError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise EnsembleError(f"unsupported schema_version {manifest.get('schema_version')}")
    if manifest.get("dtype") != "f32-le":
        raise EnsembleError(f"unsupported dtype marker {manifest.get('dtype')!r}")
    n = int(manifest.get("n", 0))
    if n < 1:
        raise EnsembleError("ensemble must contain at least one instance")
    instances = manifest.get("instances", [])
    if len(instances) != n:
        raise EnsembleError(f"manifest lists {len(instances)} instances, n={n}")
    hf, wf, f = manifest["feature_shape"]
    sal_shape = tuple(manifest["saliency_shape"])
    if sal_shape != (hf, wf):
        raise EnsembleError("saliency grid must match the feature grid")

    feats, sals, masks = [], [], []
    images: list[np.ndarray | None] = []
    keypoints: list[KeypointSet | None] = []
    image_size = tuple(manifest["image_size"]) if "image_size" in manifest else None
    mask_shape = tuple(manifest.get("mask_shape", image_size or (hf, wf)))
    for ent in instances:
        feats.append(_read_raw(root / ent["features"], (hf, wf, f)))
        sals.append(_read_raw(root / ent["saliency"], (hf, wf)))
        if ent.get("image"):
            img_path = root / ent["image"]
            if not img_path.exists():
                raise EnsembleError(f"missing image file: {img_path}")
            from PIL import Image

            images.append(np.asarray(Image.open(img_path).convert("RGB")))
        else:
            images.append(None)
        if ent.get("keypoints"):
            kp_path = root / ent["keypoints"]
            if not kp_path.exists():
                raise EnsembleError(f"missing keypoint file: {kp_path}")
            kp = json.loads(kp_path.read_text())
            keypoints.append(
                KeypointSet(
                    names=list(kp["names"]),
                    points=np.asarray(kp["points"], dtype=np.float64),
                    visible=np.asarray(kp["visible"], dtype=bool),
                )
            )
        else:
            keypoints.append(None)
        if ent.get("mask"):
            masks.append(_read_raw(root / ent["mask"], mask_shape))

    sal = torch.from_numpy(np.stack(sals))
    if float(sal.min()) < -1e-6 or float(sal.max()) > 1 + 1e-6:
        raise EnsembleError("saliency values must lie in [0, 1]")
    return FeatureEnsemble(
        features=torch.from_numpy(np.stack(feats)),
        saliency=sal,
        images=images,
        keypoints=keypoints,
        masks=torch.from_numpy(np.stack(masks)) if masks else None,
        image_size=image_size,
        meta=manifest.get("source", {}),
    )


def write_ensemble(
    path,
    features: np.ndarray,
    saliency: np.ndarray,
    images: list[np.ndarray] | None = None,
    keypoints: list[dict] | None = None,
    masks: np.ndarray | None = None,
    image_size: tuple[int, int] | None = None,
    source: dict | None = None,
) -> Path:
    """Write an ensemble directory in the documented layout."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    n, hf, wf, f = features.shape
    instances = []
    for k in range(n):
        ent = {"features": f"feat_{k}.bin", "saliency": f"sal_{k}.bin"}
        features[k].astype("<f4").tofile(root / ent["features"])
        saliency[k].astype("<f4").tofile(root / ent["saliency"])
        if images is not None and images[k] is not None:
            from PIL import Image

            ent["image"] = f"img_{k}.png"
            Image.fromarray(images[k]).save(root / ent["image"])
        if keypoints is not None and keypoints[k] is not None:
            ent["keypoints"] = f"kp_{k}.json"
            (root / ent["keypoints"]).write_text(json.dumps(keypoints[k]))
        if masks is not None:
            ent["mask"] = f"mask_{k}.bin"
            masks[k].astype("<f4").tofile(root / ent["mask"])
        instances.append(ent)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dtype": "f32-le",
        "n": n,
        "feature_shape": [hf, wf, f],
        "saliency_shape": [hf, wf],
        "instances": instances,
    }
    if image_size is not None:
        manifest["image_size"] = list(image_size)
    if masks is not None:
        manifest["mask_shape"] = list(masks.shape[1:])
    if source:
        manifest["source"] = source
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Classic Otsu split on a 1-D sample.

    A constant sample has no upper mode; the threshold then sits at the
    maximum so that nothing passes a strict ``>`` test.
    """
    if values.size == 0 or float(values.max() - values.min()) < 1e-9:
        return float(values.max()) if values.size else 0.5
    hist, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = hist.sum()
    if total == 0:
        return 0.5
    w0 = np.cumsum(hist)
    w1 = total - w0
    mu0 = np.cumsum(hist * centers) / np.maximum(w0, 1)
    mu1 = (np.sum(hist * centers) - np.cumsum(hist * centers)) / np.maximum(w1, 1)
    between = w0[:-1] * w1[:-1] * (mu0[:-1] - mu1[:-1]) ** 2
    return float(centers[int(np.argmax(between))])


def saliency_thresholds(ensemble: FeatureEnsemble) -> torch.Tensor:
    """Per-instance Otsu threshold on the saliency maps."""
    return torch.tensor(
        [otsu_threshold(ensemble.saliency[j].numpy().ravel()) for j in range(ensemble.n)]
    )


def salient_mask(ensemble: FeatureEnsemble, thresholds: torch.Tensor | None = None) -> torch.Tensor:
    thr = saliency_thresholds(ensemble) if thresholds is None else thresholds
    return ensemble.saliency > thr[:, None, None]


@dataclass
class PcaModel:
    mean: np.ndarray  # (f_in,)
    components: np.ndarray  # (f_out, f_in) orthonormal rows


def fit_pca(data: np.ndarray, f_out: int) -> PcaModel:
    """PCA by SVD with a deterministic sign convention: the largest-magnitude
    entry of each component is made positive."""
    if data.shape[0] < f_out:
        raise EnsembleError(
            f"need at least {f_out} salient pixels to fit PCA, found {data.shape[0]}"
        )
    mean = data.mean(axis=0)
    centered = data - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:f_out]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return PcaModel(mean=mean, components=comps)


def pca_reduce(ensemble: FeatureEnsemble, f_out: int) -> FeatureEnsemble:
    """Project all feature maps onto the top ``f_out`` principal directions
    fitted over salient pixels pooled across instances."""
    if f_out > ensemble.feat_dim:
        raise EnsembleError(f"f_out={f_out} exceeds feature dim {ensemble.feat_dim}")
    sal = salient_mask(ensemble)
    data = ensemble.features[sal].numpy().astype(np.float64)
    model = fit_pca(data, f_out)
    flat = ensemble.features.numpy().astype(np.float64).reshape(-1, ensemble.feat_dim)
    proj = (flat - model.mean) @ model.components.T
    new_feats = torch.from_numpy(
        proj.reshape(ensemble.n, *ensemble.grid_size, f_out).astype(np.float32)
    )
    return FeatureEnsemble(
        features=new_feats,
        saliency=ensemble.saliency,
        images=ensemble.images,
        keypoints=ensemble.keypoints,
        masks=ensemble.masks,
        image_size=ensemble.image_size,
        meta=ensemble.meta,
    )


def normalize_features(ensemble: FeatureEnsemble) -> FeatureEnsemble:
    """Unit-normalize every pixel feature (zero rows stay zero)."""
    norms = torch.linalg.norm(ensemble.features, dim=-1, keepdim=True).clamp(min=1e-12)
    return FeatureEnsemble(
        features=ensemble.features / norms,
        saliency=ensemble.saliency,
        images=ensemble.images,
        keypoints=ensemble.keypoints,
        masks=ensemble.masks,
        image_size=ensemble.image_size,
        meta=ensemble.meta,
    )


@dataclass
class ClusterModel:
    centroids: torch.Tensor  # (c, f) unit-normalized
    assignments: torch.Tensor  # (n, hf, wf) long, -1 on non-salient pixels
    tau: float  # foreground distance threshold
    sal_thresholds: torch.Tensor  # (n,)
    sse_history: list[float]

    @property
    def c(self) -> int:
        return self.centroids.shape[0]


def _kmeans_pp_init(data: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(data.shape[0])]]
    for _ in range(c - 1):
        d2 = np.min(
            ((data[:, None, :] - np.stack(centers)[None, :, :]) ** 2).sum(-1), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(data[rng.integers(data.shape[0])])
            continue
        probs = d2 / total
        centers.append(data[rng.choice(data.shape[0], p=probs)])
    return np.stack(centers)


def lloyd_kmeans(
    data: np.ndarray, c: int, seed: int, max_iters: int = 100
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded k-means++ plus Lloyd iterations until assignments stabilize.

    Returns (centroids, labels, per-iteration SSE history).
    """
    if data.shape[0] < c:
        raise EnsembleError(f"need at least {c} salient pixels, found {data.shape[0]}")
    if np.allclose(data, data[0], atol=1e-12):
        raise EnsembleError("degenerate features: all salient pixels identical")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(data, c, rng)
    labels = np.zeros(data.shape[0], dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(data.shape[0]), new_labels].sum()))
        for k in range(c):
            sel = new_labels == k
            if sel.any():
                centers[k] = data[sel].mean(axis=0)
        if np.array_equal(new_labels, labels) and len(history) > 1:
            break
        labels = new_labels
    return centers, labels, history


def kmeans(ensemble: FeatureEnsemble, c: int = 4, seed: int = 0) -> ClusterModel:
    """Cluster salient pixel features across the whole ensemble."""
    thr = saliency_thresholds(ensemble)
    sal = ensemble.saliency > thr[:, None, None]
    data = ensemble.features[sal].numpy().astype(np.float64)
    centers, labels, history = lloyd_kmeans(data, c, seed)
    centers = centers / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-12)
    cent_t = torch.from_numpy(centers.astype(np.float32))

    d2 = torch.cdist(ensemble.features[sal].reshape(-1, ensemble.feat_dim), cent_t) ** 2
    final_labels = d2.argmin(dim=1)
    assignments = torch.full(ensemble.saliency.shape, -1, dtype=torch.long)
    assignments[sal] = final_labels
    min_d = torch.sqrt(d2.min(dim=1).values)
    # 1.5x the 95th percentile keeps essentially the whole foreground mode
    # while still rejecting far semantic outliers; the floor covers the
    # noise-free case where salient pixels sit exactly on centroids
    tau = max(1.5 * float(torch.quantile(min_d, 0.95)), 1e-6)
    return ClusterModel(
        centroids=cent_t,
        assignments=assignments,
        tau=tau,
        sal_thresholds=thr,
        sse_history=history,
    )


def pseudo_silhouette(
    ensemble: FeatureEnsemble,
    clusters: ClusterModel,
    instance: int,
    out_size: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Binary foreground mask: salient pixels whose min centroid distance is
    below tau. Optionally nearest-neighbor upsampled to ``out_size``."""
    feats = ensemble.features[instance].reshape(-1, ensemble.feat_dim)
    dist = torch.cdist(feats, clusters.centroids).min(dim=1).values
    hf, wf = ensemble.grid_size
    sal = ensemble.saliency[instance] > clusters.sal_thresholds[instance]
    mask = (dist.reshape(hf, wf) <= clusters.tau) & sal
    mask = mask.float()
    if out_size is not None and out_size != (hf, wf):
        h, w = out_size
        rows = (torch.arange(h) * hf) // h
        cols = (torch.arange(w) * wf) // w
        mask = mask[rows][:, cols]
    return mask


@dataclass
class PartClusterMap:
    """Total assignment of every part to a feature cluster."""

    clusters: np.ndarray  # (b,) int
    part_names: list[str]

    def __post_init__(self):
        if len(self.clusters) != len(self.part_names):
            raise ValueError("part/cluster count mismatch")
        if (np.asarray(self.clusters) < 0).any():
            raise ValueError("part-cluster map must be total")

    @staticmethod
    def from_json(path, part_names: list[str]) -> "PartClusterMap":
        table = json.loads(Path(path).read_text())
        missing = [n for n in part_names if n not in table]
        if missing:
            raise ValueError(f"part map missing entries for: {', '.join(missing)}")
        return PartClusterMap(
            clusters=np.array([int(table[n]) for n in part_names], dtype=np.int64),
            part_names=list(part_names),
        )

    def to_json(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {n: int(c) for n, c in zip(self.part_names, self.clusters)}, indent=1
            )
        )


def _cluster_row_stats(clusters: ClusterModel) -> tuple[np.ndarray, np.ndarray]:
    """Mean image row and pixel count per cluster, pooled over instances."""
    c = clusters.c
    rows = np.zeros(c)
    counts = np.zeros(c)
    assign = clusters.assignments.numpy()
    n, hf, _ = assign.shape
    row_idx = np.arange(hf)[None, :, None] * np.ones_like(assign)
    for k in range(c):
        sel = assign == k
        counts[k] = sel.sum()
        rows[k] = row_idx[sel].mean() if counts[k] > 0 else hf / 2.0
    return rows, counts


def map_parts_heuristic(clusters: ClusterModel, skeleton: Skeleton) -> PartClusterMap:
    """Height-based part assignment for the four-cluster regime.

    Lower legs go to the cluster sitting lowest in the images (largest mean
    row), head and neck to the highest one, and the remaining parts to
    whichever remaining cluster best matches their expected height from the
    rest skeleton. Ties break toward the larger cluster.
    """
    if clusters.c != 4:
        raise ValueError("heuristic part mapping is defined for exactly 4 clusters")
    rows, counts = _cluster_row_stats(clusters)
    order = sorted(range(4), key=lambda k: (rows[k], -counts[k], k))
    head_cluster = order[0]
    leg_cluster = order[-1]
    middle = [k for k in order if k not in (head_cluster, leg_cluster)]

    names = skeleton.part_names
    rest = skeleton.rest_joints.numpy()
    centroid_y = np.array(
        [0.5 * (rest[p][1] + rest[d][1]) for p, d in skeleton.bones]
    )
    y_min, y_max = centroid_y.min(), centroid_y.max()
    span = max(y_max - y_min, 1e-9)
    expected_row = rows[head_cluster] + (y_max - centroid_y) / span * (
        rows[leg_cluster] - rows[head_cluster]
    )

    assignment = np.zeros(len(names), dtype=np.int64)
    for i, name in enumerate(names):
        if name == "head" or name == "neck":
            assignment[i] = head_cluster
        elif "lower" in name or "middle" in name:
            assignment[i] = leg_cluster
        else:
            best = min(middle, key=lambda k: (abs(rows[k] - expected_row[i]), -counts[k], k))
            assignment[i] = best
    return PartClusterMap(clusters=assignment, part_names=list(names))


def init_vertex_features(
    part_map: PartClusterMap, clusters: ClusterModel, topo: SphereTopology
) -> VertexFeatures:
    """Seed every vertex of part ``i`` with its mapped cluster centroid."""
    b = len(part_map.clusters)
    m = topo.num_vertices
    cent = clusters.centroids
    cent = cent / torch.linalg.norm(cent, dim=1, keepdim=True).clamp(min=1e-12)
    q = cent[torch.from_numpy(np.asarray(part_map.clusters))]  # (b, f)
    q = q.unsqueeze(1).expand(b, m, -1).reshape(b * m, -1).contiguous()
    return VertexFeatures(q=q, count=torch.ones(b * m, dtype=torch.long))
