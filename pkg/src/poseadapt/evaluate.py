"""Evaluation: median translation/rotation errors per scene and domain,
cross-domain report tables, trajectory CSV export, and 2-D latent projections.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tensor, no_grad
from .data import PreprocessConfig, SplitManifest, load_manifest, preprocess
from .model import AprModel
from .scene import load_png

TRAJECTORY_HEADER = "idx,gx,gy,gz,gw,gqx,gqy,gqz,px,py,pz,pw,pqx,pqy,pqz,et,er"
EMBEDDING_HEADER = "domain,index,pca_T_x,pca_T_y,pca_R_x,pca_R_y"


def rotation_angle_deg(q_pred: np.ndarray, q_gt: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions in degrees, sign-invariant."""
    q_pred = np.asarray(q_pred, dtype=np.float64)
    q_gt = np.asarray(q_gt, dtype=np.float64)
    for name, q in (("q_pred", q_pred), ("q_gt", q_gt)):
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ContractError(f"{name} norm {norm:.8f} is not unit within 1e-6")
    dot = np.clip(abs(float(np.dot(q_pred, q_gt))), 0.0, 1.0)
    return float(np.degrees(2.0 * np.arccos(dot)))


def lower_median(values) -> float:
    """Deterministic order statistic: element (n-1)//2 of the sorted values."""
    values = sorted(float(v) for v in values)
    if not values:
        raise ContractError("median of an empty sequence")
    return values[(len(values) - 1) // 2]


def median_errors(pred_t: np.ndarray, pred_q: np.ndarray, gt_t: np.ndarray,
                  gt_q: np.ndarray) -> tuple[float, float]:
    """(median translation error [m], median rotation error [deg])."""
    pred_t, gt_t = np.atleast_2d(pred_t), np.atleast_2d(gt_t)
    pred_q, gt_q = np.atleast_2d(pred_q), np.atleast_2d(gt_q)
    if len(pred_t) == 0:
        raise ContractError("median_errors needs at least one sample")
    t_errors = np.linalg.norm(pred_t - gt_t, axis=1)
    r_errors = [rotation_angle_deg(p, g) for p, g in zip(pred_q, gt_q)]
    return lower_median(t_errors), lower_median(r_errors)


# -- inference over a manifest ---------------------------------------------------


@dataclass
class SplitPredictions:
    domain: str
    pred_t: np.ndarray      # (N, 3)
    pred_q: np.ndarray      # (N, 4) unit, w >= 0
    gt_t: np.ndarray
    gt_q: np.ndarray
    latent_t: np.ndarray    # (N, D)
    latent_r: np.ndarray


def predict_split(model: AprModel, manifest: SplitManifest, domain: str,
                  batch_size: int = 32) -> SplitPredictions:
    """Eval-mode single-branch predictions for every record, center-cropped."""
    pre = PreprocessConfig(**model.preprocess)
    preds, lat_t, lat_r = [], [], []
    records = manifest.records
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = []
        for record in chunk:
            path = manifest.image_path(record, domain)
            if not path.is_file():
                raise FileNotFoundError(
                    f"missing {domain!r} image for {record.path}: {path}")
            images.append(preprocess(load_png(path), pre, "eval"))
        with no_grad():
            out = model.forward(Tensor(np.stack(images)), mode="eval")
        preds.append(out.pose.data.copy())
        lat_t.append(out.latent_t.data.copy())
        lat_r.append(out.latent_r.data.copy())
    pose = np.concatenate(preds)
    return SplitPredictions(
        domain=domain, pred_t=pose[:, :3], pred_q=pose[:, 3:],
        gt_t=np.stack([r.t for r in records]), gt_q=np.stack([r.q for r in records]),
        latent_t=np.concatenate(lat_t), latent_r=np.concatenate(lat_r))


# -- report assembly ----------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    scene: str
    domain: str
    median_t: float
    median_r: float
    count: int


@dataclass
class MetricsReport:
    rows: list[ReportRow]

    def domains(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row.domain not in seen:
                seen.append(row.domain)
        return seen

    def row(self, scene: str, domain: str) -> ReportRow:
        for r in self.rows:
            if r.scene == scene and r.domain == domain:
                return r
        raise KeyError((scene, domain))

    def domain_average(self, domain: str) -> tuple[float, float]:
        """Arithmetic mean of per-scene medians for one domain."""
        picked = [r for r in self.rows if r.domain == domain]
        return (float(np.mean([r.median_t for r in picked])),
                float(np.mean([r.median_r for r in picked])))

    def overall_average(self) -> tuple[float, float]:
        pairs = [self.domain_average(d) for d in self.domains()]
        return (float(np.mean([p[0] for p in pairs])),
                float(np.mean([p[1] for p in pairs])))

    def to_text(self) -> str:
        width = max([len(r.scene) for r in self.rows] + [7])
        lines = [f"{'scene':<{width}}  {'domain':<8}  {'T(m)':>10}  {'R(deg)':>10}  {'n':>5}"]
        for r in self.rows:
            lines.append(f"{r.scene:<{width}}  {r.domain:<8}  {r.median_t:>10.4f}  "
                         f"{r.median_r:>10.4f}  {r.count:>5d}")
        for d in self.domains():
            mt, mr = self.domain_average(d)
            lines.append(f"{'average':<{width}}  {d:<8}  {mt:>10.4f}  {mr:>10.4f}  {'':>5}")
        mt, mr = self.overall_average()
        lines.append(f"{'average':<{width}}  {'all':<8}  {mt:>10.4f}  {mr:>10.4f}  {'':>5}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        lines = ["scene,domain,median_t_m,median_r_deg,n"]
        for r in self.rows:
            lines.append(f"{r.scene},{r.domain},{r.median_t:.17g},{r.median_r:.17g},{r.count}")
        return "\n".join(lines) + "\n"


def report_from_predictions(predictions: dict[str, SplitPredictions],
                            scene: str) -> MetricsReport:
    rows = []
    for domain, p in predictions.items():
        mt, mr = median_errors(p.pred_t, p.pred_q, p.gt_t, p.gt_q)
        rows.append(ReportRow(scene=scene, domain=domain, median_t=mt,
                              median_r=mr, count=len(p.gt_t)))
    return MetricsReport(rows=rows)


def cross_domain_report(model: AprModel, data_dir, domains,
                        split: str = "test") -> MetricsReport:
    """Evaluate the single-branch model on each domain's split of one dataset."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / f"{split}.manifest")
    predictions = {}
    for domain in domains:
        domain_dir = data_dir / domain
        if not domain_dir.is_dir():
            raise FileNotFoundError(f"domain directory missing: {domain_dir}")
        predictions[domain] = predict_split(model, manifest, domain)
    return report_from_predictions(predictions, scene=data_dir.name)


# -- exports ----------------------------------------------------------------------


def export_trajectory(model: AprModel, manifest: SplitManifest, out_path,
                      domain: str = "real") -> Path:
    """One CSV row per test image in sequence order with poses and errors."""
    p = predict_split(model, manifest, domain)
    lines = [TRAJECTORY_HEADER]
    for i in range(len(p.gt_t)):
        et = float(np.linalg.norm(p.pred_t[i] - p.gt_t[i]))
        er = rotation_angle_deg(p.pred_q[i], p.gt_q[i])
        fields = ([i] + [f"{v:.17g}" for v in p.gt_t[i]] + [f"{v:.17g}" for v in p.gt_q[i]]
                  + [f"{v:.17g}" for v in p.pred_t[i]] + [f"{v:.17g}" for v in p.pred_q[i]]
                  + [f"{et:.17g}", f"{er:.17g}"])
        lines.append(",".join(str(f) for f in fields))
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def pca_2d(points: np.ndarray) -> np.ndarray:
    """Project rows onto the top-2 principal components, deterministically signed."""
    if len(points) < 2:
        raise ContractError("PCA needs at least 2 samples")
    centered = points - points.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (len(points) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    components = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    for j in range(components.shape[1]):
        pivot = np.argmax(np.abs(components[:, j]))
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


def export_embeddings(model: AprModel, data_dir, domains, out_path,
                      split: str = "test") -> Path:
    """Per-domain latents projected by PCA fit on the pooled latents."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / f"{split}.manifest")
    per_domain = {d: predict_split(model, manifest, d) for d in domains}
    pooled_t = np.concatenate([p.latent_t for p in per_domain.values()])
    pooled_r = np.concatenate([p.latent_r for p in per_domain.values()])
    proj_t = pca_2d(pooled_t)
    proj_r = pca_2d(pooled_r)
    lines = [EMBEDDING_HEADER]
    offset = 0
    for domain in domains:
        n = len(per_domain[domain].latent_t)
        for i in range(n):
            pt, pr = proj_t[offset + i], proj_r[offset + i]
            lines.append(f"{domain},{i},{pt[0]:.17g},{pt[1]:.17g},"
                         f"{pr[0]:.17g},{pr[1]:.17g}")
        offset += n
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def collect_latents(model: AprModel, data_dir, domains,
                    split: str = "test") -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Raw (latent_T, latent_R) arrays per domain for invariance analysis."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / f"{split}.manifest")
    out = {}
    for domain in domains:
        p = predict_split(model, manifest, domain)
        out[domain] = (p.latent_t, p.latent_r)
    return out


def centroid_spread(latents_by_domain: dict[str, np.ndarray]) -> float:
    """Mean pairwise Euclidean distance between per-domain latent centroids."""
    names = sorted(latents_by_domain)
    if len(names) < 2:
        raise ContractError("centroid spread needs at least two domains")
    centroids = [latents_by_domain[n].mean(axis=0) for n in names]
    dists = [np.linalg.norm(centroids[i] - centroids[j])
             for i in range(len(centroids)) for j in range(i + 1, len(centroids))]
    return float(np.mean(dists))
