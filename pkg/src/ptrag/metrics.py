"""Evaluation metrics: DEG correlations, reconstruction errors, PCA-space distances."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .stats import rankdata, t_two_sided_p

METRIC_NAMES = ("pearson_deg", "spearman_deg", "mse", "rmse", "mae", "mse_pca50",
                "w1", "w2", "energy", "mmd")
HIGHER_IS_BETTER = {"pearson_deg", "spearman_deg"}
METRIC_GROUPS = (
    ("Gene-level expression correlations", ("pearson_deg", "spearman_deg")),
    ("Expression reconstruction accuracy", ("mse", "rmse", "mae", "mse_pca50")),
    ("Distributional similarity", ("w1", "w2", "energy", "mmd")),
)
W2_NOTE = ("w2 is the mean squared Euclidean transport cost (squared 2-Wasserstein); "
           "w2_root is its square root")


# -- differential expression --------------------------------------------------


@dataclass(frozen=True)
class DEGSet:
    gene_indices: list
    p_values: np.ndarray


def welch_t_deg(control, perturbed, alpha: float = 0.05) -> DEGSet:
    """Genes whose Welch two-sided p-value (control vs perturbed) is below ``alpha``."""
    x = np.asarray(control, dtype=np.float64)
    y = np.asarray(perturbed, dtype=np.float64)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"Welch test needs >= 2 cells per group, got {n} and {m}")
    if x.shape[1:] != y.shape[1:]:
        raise ValueError(f"gene dimensions differ: {x.shape} vs {y.shape}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    vx, vy = x.var(axis=0, ddof=1) / n, y.var(axis=0, ddof=1) / m
    p = np.ones(x.shape[1])
    for g in range(x.shape[1]):
        se2 = vx[g] + vy[g]
        if se2 == 0:
            p[g] = 1.0 if mx[g] == my[g] else 0.0
            continue
        t = (my[g] - mx[g]) / math.sqrt(se2)
        df = se2 * se2 / (vx[g] ** 2 / (n - 1) + vy[g] ** 2 / (m - 1))
        p[g] = t_two_sided_p(t, df)
    return DEGSet([int(g) for g in np.flatnonzero(p < alpha)], p)


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def correlations(pred_effect, true_effect) -> tuple[float | None, float | None]:
    """Pearson and average-rank Spearman; ``None`` when undefined."""
    x = np.asarray(pred_effect, dtype=np.float64)
    y = np.asarray(true_effect, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"effect vectors differ in shape: {x.shape} vs {y.shape}")
    if x.size < 2:
        return None, None
    return _pearson(x, y), _pearson(rankdata(x), rankdata(y))


def reconstruction_errors(pred, target) -> tuple[float, float, float]:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    mse = float(np.mean(d * d))
    return mse, math.sqrt(mse), float(np.mean(np.abs(d)))


# -- PCA ----------------------------------------------------------------------


@dataclass(frozen=True)
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # [G, q]
    eigenvalues: np.ndarray
    fitted_on: str = "train"

    @property
    def q(self) -> int:
        return self.components.shape[1]

    def project(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components


def achievable_rank(cells) -> int:
    x = np.asarray(cells, dtype=np.float64)
    ev = np.linalg.eigvalsh(np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]))
    return int((ev > max(ev.max(), 0.0) * 1e-10).sum())


def fit_pca(train_cells, q: int = 50, tag: str = "train") -> PCABasis:
    """Top-``q`` covariance eigenvectors; each flipped so its largest-|entry| is positive."""
    x = np.asarray(train_cells, dtype=np.float64)
    n, g = x.shape
    if n < q + 1:
        raise ValueError(f"need at least q+1={q + 1} cells to fit {q} components, got {n}")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(g, g)
    ev, vec = np.linalg.eigh(cov)
    ev, vec = ev[::-1], vec[:, ::-1]
    rank = int((ev > max(ev[0], 0.0) * 1e-10).sum())
    if rank < q:
        raise ValueError(f"covariance rank {rank} < q={q}; achievable q <= {rank}")
    comps = vec[:, :q].copy()
    for j in range(q):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1
    return PCABasis(mu, comps, ev[:q].copy(), tag)


def default_q(train_cells, q_max: int = 50) -> int:
    x = np.asarray(train_cells)
    return max(1, min(q_max, x.shape[0] - 1, achievable_rank(x)))


# -- distributional distances --------------------------------------------------


def equalize_sizes(a, b, rng: np.random.Generator):
    """Subsample the larger cloud (without replacement) to the smaller size."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
    if len(b) > n:
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
    return a, b


def _canonical_pair(a, b):
    """Order two arrays by (shape, bytes) so symmetric distances are bitwise symmetric."""
    da = a.data if isinstance(a, ad.Tensor) else a
    db = b.data if isinstance(b, ad.Tensor) else b
    if (db.shape, db.tobytes()) < (da.shape, da.tobytes()):
        return b, a
    return a, b


def wasserstein(pcloud_a, pcloud_b, order: int = 1) -> float:
    """Exact OT between equal-size uniform empirical measures.

    ``order=1``: mean Euclidean cost; ``order=2``: mean squared Euclidean cost.
    """
    a = np.atleast_2d(np.asarray(pcloud_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(pcloud_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"point clouds differ in size: {a.shape} vs {b.shape}")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    a, b = _canonical_pair(a, b)
    diff = a[:, None, :] - b[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    cost = np.sqrt(sq) if order == 1 else sq
    match = kernels.linear_assignment(np.ascontiguousarray(cost))
    return float(cost[np.arange(len(a)), match].mean())


def mmd_rbf(pcloud_a, pcloud_b) -> float:
    """Biased (V-statistic) squared MMD, RBF kernel, median-heuristic bandwidth."""
    a = np.atleast_2d(np.asarray(pcloud_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(pcloud_b, dtype=np.float64))
    a, b = _canonical_pair(a, b)
    pooled = np.concatenate([a, b])
    d = np.sqrt(((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=-1))
    iu = np.triu_indices(len(pooled), k=1)
    pos = d[iu][d[iu] > 0]
    sigma = float(np.median(pos)) if pos.size else 1.0
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    n = len(a)
    kaa, kbb, kab = k[:n, :n], k[n:, n:], k[:n, n:]
    return float(kaa.mean() + kbb.mean() - 2.0 * kab.mean())


def energy_distance_tensor(a, b) -> ad.Tensor:
    """Energy distance per leading batch index; V-statistic over all pairs.

    ``2*mean|a-b| - mean|a-a'| - mean|b-b'|`` for clouds ``[..., n, d]``/``[..., m, d]``.
    """
    a, b = _canonical_pair(ad.as_tensor(a), ad.as_tensor(b))
    n, m = a.shape[-2], b.shape[-2]
    if n < 2 or m < 2:
        raise ValueError(f"energy distance needs >= 2 points per cloud, got {n} and {m}")
    cross = ad.scale(ad.sum_axis(ad.pairwise_euclidean(a, b), (-2, -1)), 2.0 / (n * m))
    within_a = ad.scale(ad.sum_axis(ad.pairwise_euclidean(a, a), (-2, -1)), 1.0 / (n * n))
    within_b = ad.scale(ad.sum_axis(ad.pairwise_euclidean(b, b), (-2, -1)), 1.0 / (m * m))
    return ad.sub(cross, ad.add(within_a, within_b))


def energy_distance(pcloud_a, pcloud_b) -> float:
    with ad.no_grad():
        return energy_distance_tensor(ad.Tensor(pcloud_a), ad.Tensor(pcloud_b)).item()


# -- per-perturbation rows and reports ----------------------------------------


@dataclass
class MetricsRow:
    pert_id: str
    cell_type: str
    pearson_deg: float | None
    spearman_deg: float | None
    mse: float
    rmse: float
    mae: float
    mse_pca50: float
    w1: float
    w2: float
    w2_root: float
    energy: float
    mmd: float
    n_degs: int


def compute_row(x_ctrl, x_true, x_pred, pca: PCABasis, pert_id: str, cell_type: str,
                alpha: float = 0.05, rng: np.random.Generator | None = None) -> MetricsRow:
    x_ctrl = np.asarray(x_ctrl, dtype=np.float64)
    x_true = np.asarray(x_true, dtype=np.float64)
    x_pred = np.asarray(x_pred, dtype=np.float64)
    degs = welch_t_deg(x_ctrl, x_true, alpha).gene_indices
    ctrl_mean = x_ctrl.mean(axis=0)
    pred_effect = (x_pred.mean(axis=0) - ctrl_mean)[degs]
    true_effect = (x_true.mean(axis=0) - ctrl_mean)[degs]
    pearson, spearman = correlations(pred_effect, true_effect)
    mse, rmse, mae = reconstruction_errors(x_pred, x_true)
    zp, zt = pca.project(x_pred), pca.project(x_true)
    mse_pca = float(np.mean((zp - zt) ** 2))
    if len(zp) != len(zt):
        zp, zt = equalize_sizes(zp, zt, rng or np.random.default_rng(0))
    w2 = wasserstein(zp, zt, 2)
    return MetricsRow(
        pert_id=pert_id, cell_type=cell_type,
        pearson_deg=pearson, spearman_deg=spearman,
        mse=mse, rmse=rmse, mae=mae, mse_pca50=mse_pca,
        w1=wasserstein(zp, zt, 1), w2=w2, w2_root=math.sqrt(w2),
        energy=energy_distance(zp, zt), mmd=mmd_rbf(zp, zt), n_degs=len(degs),
    )


def _summary(values: list) -> dict:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}


@dataclass
class MetricsReport:
    rows: list
    pca_q: int
    header: dict = field(default_factory=dict)

    def values(self, metric: str) -> list:
        return [getattr(r, metric) for r in self.rows if getattr(r, metric) is not None]

    def aggregate(self) -> dict:
        names = METRIC_NAMES + ("w2_root",)
        # reduce in sorted-key order so the result does not depend on row order
        rows = sorted(self.rows, key=lambda r: (r.cell_type, r.pert_id))
        out = {"overall": {k: _summary([getattr(r, k) for r in rows]) for k in names},
               "per_cell_type": {}}
        for ct in sorted({r.cell_type for r in rows}):
            sub = [r for r in rows if r.cell_type == ct]
            out["per_cell_type"][ct] = {k: _summary([getattr(r, k) for r in sub]) for k in names}
        return out

    def to_dict(self) -> dict:
        header = {"pca_q": self.pca_q, "w2_convention": W2_NOTE, **self.header}
        rows = sorted((asdict(r) for r in self.rows), key=lambda r: (r["cell_type"], r["pert_id"]))
        return {"header": header, "rows": rows, "aggregate": self.aggregate()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        header = {k: v for k, v in d["header"].items() if k not in ("pca_q", "w2_convention")}
        return cls([MetricsRow(**r) for r in d["rows"]], d["header"]["pca_q"], header)
