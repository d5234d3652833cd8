"""Training loop, evaluation, model comparison, sweeps and selection-overlap analysis."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .metrics import (METRIC_NAMES, HIGHER_IS_BETTER, MetricsReport, PCABasis, compute_row,
                      default_q, energy_distance_tensor, fit_pca)
from .model import MODEL_KINDS, Batch, ModelConfig, PerturbationModel, build_model, loss
from .nn import AdamState, adam_step
from .retrieval import PerturbationDB, top_k_table
from .selector import EXCLUDE, INCLUDE, sample_gumbel
from .stats import (JaccardMatrix, benjamini_hochberg, fdr_marker, jaccard, jaccard_overlap,
                    mann_whitney_u, top_n_from_counts)
from .synthdata import Sample

log = logging.getLogger(__name__)

RAG_KINDS = ("vanilla_rag", "pt_rag")


@dataclass(frozen=True)
class TrainConfig:
    name: str = ""
    model_kind: str = "pt_rag"
    max_steps: int = 2000
    validate_every: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 5e-4
    lambda_sparse: float = 0.1
    K: int = 16
    tau: float = 0.5
    seed: int = 0
    d: int = 32
    depth: int = 2
    heads: int = 4
    score_hidden: int = 128
    proj_hidden: int = 128
    eval_noise: bool = True
    train_probe: int = 64

    @property
    def label(self) -> str:
        return self.name or self.model_kind

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind: must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        for key in ("max_steps", "validate_every", "batch_size", "K", "d", "heads", "score_hidden",
                    "proj_hidden", "train_probe"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key}: must be >= 1, got {getattr(self, key)}")
        if self.depth < 0:
            raise ValueError(f"depth: must be >= 0, got {self.depth}")
        if self.validate_every > self.max_steps:
            raise ValueError("validate_every: must be <= max_steps")
        if self.lr < 0:
            raise ValueError(f"lr: must be >= 0, got {self.lr}")
        if self.weight_decay < 0 or self.lambda_sparse < 0:
            raise ValueError("weight_decay and lambda_sparse: must be >= 0")
        if not self.tau > 0:
            raise ValueError(f"tau: must be > 0, got {self.tau}")
        if self.d % self.heads:
            raise ValueError(f"heads: d={self.d} must be divisible by heads={self.heads}")

    def model_config(self, db: PerturbationDB, n_genes: int) -> ModelConfig:
        return ModelConfig(d=self.d, G=n_genes, E=db.dim, K=self.K, tau=self.tau,
                           lambda_sparse=self.lambda_sparse, depth=self.depth, heads=self.heads,
                           seed=self.seed, score_hidden=self.score_hidden,
                           proj_hidden=self.proj_hidden, n_perts=db.size)


# -- data plumbing -------------------------------------------------------------


@dataclass
class Arrays:
    x_ctrl: np.ndarray   # [N, S, G]
    x_pert: np.ndarray
    query: np.ndarray    # [N] database index
    pert_ids: list
    cell_types: list

    def __len__(self):
        return len(self.pert_ids)


def stack(samples: list[Sample], db: PerturbationDB) -> Arrays:
    if not samples:
        raise ValueError("no samples")
    return Arrays(np.stack([s.x_ctrl for s in samples]), np.stack([s.x_pert for s in samples]),
                  np.array([db.index_of(s.pert_id) for s in samples], dtype=np.int64),
                  [s.pert_id for s in samples], [s.cell_type for s in samples])


def select_split(samples: list[Sample], split: str) -> list[Sample]:
    return [s for s in samples if s.split == split]


def make_batch(arr: Arrays, idx, kind: str, db: PerturbationDB, candidates) -> Batch:
    idx = np.asarray(idx)
    q = arr.query[idx]
    if kind == "state":
        pert = np.zeros((len(idx), db.size))
        pert[np.arange(len(idx)), q] = 1.0
    else:
        pert = db.embeddings[q]
    ctx = cand = None
    if kind in RAG_KINDS:
        cand = candidates[q]
        ctx = db.embeddings[cand]
    return Batch(arr.x_ctrl[idx], pert, ctx, arr.x_pert[idx], cand)


def dataset_checksum(samples: list[Sample], db: PerturbationDB) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(f"{s.pert_id}|{s.cell_type}|{s.split}".encode())
        h.update(np.ascontiguousarray(s.x_ctrl).tobytes())
        h.update(np.ascontiguousarray(s.x_pert).tobytes())
    h.update("|".join(db.ids).encode())
    h.update(np.ascontiguousarray(db.embeddings).tobytes())
    return h.hexdigest()


def training_pca(samples: list[Sample], q_max: int = 50) -> PCABasis:
    train = select_split(samples, "train")
    cells = np.concatenate([np.concatenate([s.x_ctrl, s.x_pert]) for s in train])
    return fit_pca(cells, default_q(cells, q_max))


class _Runner:
    """Forward passes for one model over stacked arrays."""

    def __init__(self, model: PerturbationModel, db: PerturbationDB, K: int):
        self.model = model
        self.db = db
        self.kind = model.kind
        self.candidates = top_k_table(db, K) if self.kind in RAG_KINDS else None

    def batch(self, arr: Arrays, idx) -> Batch:
        return make_batch(arr, idx, self.kind, self.db, self.candidates)

    def predict(self, arr: Arrays, rng, noise_on: bool = True, chunk: int = 64):
        preds, hard = [], []
        with ad.no_grad():
            for start in range(0, len(arr), chunk):
                b = self.batch(arr, np.arange(start, min(start + chunk, len(arr))))
                pred, mask = self.model.forward(b, rng, deterministic_noise=not noise_on)
                preds.append(pred.data)
                if mask is not None:
                    hard.append(mask.hard)
        return np.concatenate(preds), (np.concatenate(hard) if hard else None)

    def energy(self, arr: Arrays, rng, noise_on: bool = True) -> tuple[float, float | None]:
        pred, hard = self.predict(arr, rng, noise_on)
        with ad.no_grad():
            e = energy_distance_tensor(ad.Tensor(pred), ad.Tensor(arr.x_pert)).data
        sel = None if hard is None else float(hard.sum(axis=-1).mean())
        return float(e.mean()), sel


# -- training -------------------------------------------------------------------


@dataclass
class RunRecord:
    config: TrainConfig
    val_losses: list
    val_selected: list
    best_step: int
    best_val: float
    train_energy_initial: float
    train_energy_final: float
    train_dist: list
    metrics: MetricsReport
    state: dict = field(repr=False)
    dataset_checksum: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def final_selected(self) -> float | None:
        return self.val_selected[-1] if self.val_selected else None

    def summary(self) -> dict:
        return {
            "config": asdict(self.config),
            "val_losses": self.val_losses,
            "val_selected": self.val_selected,
            "best_step": self.best_step,
            "best_val": self.best_val,
            "train_energy_initial": self.train_energy_initial,
            "train_energy_final": self.train_energy_final,
            "dataset_checksum": self.dataset_checksum,
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.summary(), sort_keys=True).encode())
        h.update(json.dumps(self.train_dist).encode())
        h.update(json.dumps(self.metrics.to_dict(), sort_keys=True).encode())
        for name in sorted(self.state):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.state[name]).tobytes())
        return h.hexdigest()


def _is_finite(x) -> bool:
    return x is not None and math.isfinite(x)


def train(config: TrainConfig, dataset: list[Sample], db: PerturbationDB,
          pca: PCABasis | None = None, return_model: bool = False):
    """Seeded minibatch training; the best-validation parameters are kept and
    evaluated on the test split."""
    config.validate()
    t0 = time.perf_counter()
    train_s, val_s = select_split(dataset, "train"), select_split(dataset, "val")
    if not train_s or not val_s:
        raise ValueError("dataset needs non-empty train and val splits")
    n_genes = train_s[0].x_ctrl.shape[1]
    model = build_model(config.model_kind, config.model_config(db, n_genes))
    runner = _Runner(model, db, config.K)
    tr, va = stack(train_s, db), stack(val_s, db)
    lam = config.lambda_sparse if config.model_kind == "pt_rag" else 0.0

    rng = np.random.default_rng([config.seed, 1])
    probe_idx = np.sort(np.random.default_rng([config.seed, 3]).permutation(len(tr))[:config.train_probe])
    probe = Arrays(tr.x_ctrl[probe_idx], tr.x_pert[probe_idx], tr.query[probe_idx],
                   [tr.pert_ids[i] for i in probe_idx], [tr.cell_types[i] for i in probe_idx])

    def eval_rng():
        return np.random.default_rng([config.seed, 2])

    initial, _ = runner.energy(probe, eval_rng(), config.eval_noise)
    params = model.named_parameters()
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    val_losses, val_selected, train_dist = [], [], []
    best_val, best_step, best_state = math.inf, 0, None
    bsz = min(config.batch_size, len(tr))
    for step in range(1, config.max_steps + 1):
        idx = rng.choice(len(tr), bsz, replace=False)
        batch = runner.batch(tr, idx)
        pred, mask = model.forward(batch, rng)
        lb = loss(pred, batch.x_pert, mask, lam)
        if not math.isfinite(lb.total):
            raise FloatingPointError(f"non-finite loss at step {step}: {lb}")
        ad.backward(lb.tensor)
        adam_step(params, opt)
        train_dist.append(lb.dist)
        if step % config.validate_every == 0:
            v, sel = runner.energy(va, eval_rng(), config.eval_noise)
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite validation loss at step {step}")
            val_losses.append(v)
            val_selected.append(sel)
            log.info("%s seed=%d step=%d val_energy=%.4f selected=%s", config.label, config.seed,
                     step, v, sel)
            if v < best_val:
                best_val, best_step, best_state = v, step, model.state_dict()
    final, _ = runner.energy(probe, eval_rng(), config.eval_noise)
    if best_state is not None:
        model.load_state_dict(best_state)
    pca = pca if pca is not None else training_pca(dataset)
    report = evaluate(model, dataset, db, "test", pca, config)
    record = RunRecord(config, val_losses, val_selected, best_step, best_val, initial, final,
                       train_dist, report, model.state_dict(), dataset_checksum(dataset, db),
                       time.perf_counter() - t0)
    return (record, model) if return_model else record


def restore_model(config: TrainConfig, state: dict, db: PerturbationDB, n_genes: int) -> PerturbationModel:
    model = build_model(config.model_kind, config.model_config(db, n_genes))
    model.load_state_dict(state)
    return model


def evaluate(model: PerturbationModel, dataset: list[Sample], db: PerturbationDB, split: str,
             pca: PCABasis, config: TrainConfig) -> MetricsReport:
    """Metric rows for every sample of ``split`` (one per perturbation and cell type)."""
    samples = select_split(dataset, split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    arr = stack(samples, db)
    runner = _Runner(model, db, config.K)
    pred, hard = runner.predict(arr, np.random.default_rng([config.seed, 4]), config.eval_noise)
    rows = [compute_row(arr.x_ctrl[i], arr.x_pert[i], pred[i], pca, arr.pert_ids[i],
                        arr.cell_types[i]) for i in range(len(arr))]
    header = {"model": config.label, "model_kind": config.model_kind, "seed": config.seed,
              "split": split}
    if hard is not None:
        header["mean_selected"] = float(hard.sum(axis=-1).mean())
    return MetricsReport(rows, pca.q, header)


def predict_samples(model: PerturbationModel, samples: list[Sample], db: PerturbationDB,
                    config: TrainConfig, seed: int = 0):
    arr = stack(samples, db)
    return _Runner(model, db, config.K).predict(arr, np.random.default_rng(seed), config.eval_noise)


# -- comparison -------------------------------------------------------------------


def _median(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def significance(samples: dict[str, dict[str, list]], reference: str, alpha: float = 0.05) -> dict:
    """Mann-Whitney for (reference, other) x metric, BH-corrected across all tests."""
    others = [name for name in samples if name != reference]
    tests = []
    for other in others:
        for metric in METRIC_NAMES:
            a, b = samples[reference][metric], samples[other][metric]
            if not a or not b:
                continue
            res = mann_whitney_u(a, b)
            ref_med, oth_med = float(np.median(a)), float(np.median(b))
            if ref_med == oth_med:
                better = "tie"
            elif (ref_med > oth_med) == (metric in HIGHER_IS_BETTER):
                better = reference
            else:
                better = other
            tests.append((other, metric, res, better))
    fdr = benjamini_hochberg([t[2].p_two_sided for t in tests], alpha)
    out: dict = {}
    for (other, metric, res, better), p_adj, rej in zip(tests, fdr.adjusted_p, fdr.rejected):
        out.setdefault(f"{reference} vs {other}", {})[metric] = {
            "u": res.u_statistic, "p_raw": res.p_two_sided, "p_fdr": p_adj,
            "marker": fdr_marker(p_adj), "rejected": bool(rej), "method": res.method,
            "n": res.n, "m": res.m, "better": better,
        }
    return out


def compare(configs: list[TrainConfig], dataset: list[Sample], db: PerturbationDB, seeds: list[int],
            reference: str | None = None, alpha: float = 0.05, pca: PCABasis | None = None,
            records: dict | None = None) -> tuple[dict, dict]:
    """Train every config for every seed and test the pooled per-perturbation metrics.

    ``records`` may carry already-trained runs keyed by ``(label, seed)``.
    """
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"config labels must be unique, got {labels}")
    if reference is None:
        reference = next((c.label for c in configs if c.model_kind == "pt_rag"), labels[0])
    if reference not in labels:
        raise ValueError(f"reference {reference!r} is not among {labels}")
    pca = pca if pca is not None else training_pca(dataset)
    runs = dict(records or {})
    for cfg in configs:
        for seed in seeds:
            if (cfg.label, seed) not in runs:
                runs[(cfg.label, seed)] = train(replace(cfg, seed=seed), dataset, db, pca)
    pooled = {c.label: {m: [] for m in METRIC_NAMES} for c in configs}
    models = {}
    for cfg in configs:
        per_seed = {m: [] for m in METRIC_NAMES}
        for seed in seeds:
            rep = runs[(cfg.label, seed)].metrics
            for m in METRIC_NAMES:
                vals = rep.values(m)
                pooled[cfg.label][m].extend(vals)
                per_seed[m].append(_median(vals))
        models[cfg.label] = {
            "model_kind": cfg.model_kind,
            "per_seed_median": per_seed,
            "median_over_seeds": {m: _median(per_seed[m]) for m in METRIC_NAMES},
            "pooled_mean": {m: (float(np.mean(v)) if v else None) for m, v in pooled[cfg.label].items()},
            "fingerprints": [runs[(cfg.label, s)].fingerprint() for s in seeds],
        }
    report = {
        "schema_version": 1,
        "reference": reference,
        "seeds": list(seeds),
        "alpha": alpha,
        "markers": {"†": "p_fdr < 0.01", "††": "p_fdr < 0.05", "†††": "p_fdr < 0.1"},
        "models": models,
        "tests": significance(pooled, reference, alpha),
    }
    return report, runs


# -- sweeps -----------------------------------------------------------------------


def sweep(base: TrainConfig, axis: str, values: list, dataset: list[Sample], db: PerturbationDB,
          pca: PCABasis | None = None) -> tuple[dict, list[RunRecord]]:
    if not values:
        raise ValueError("sweep needs at least one value")
    field_name = {"lambda": "lambda_sparse", "lambda_sparse": "lambda_sparse", "K": "K"}.get(axis)
    if field_name is None:
        raise ValueError(f"sweep axis must be 'lambda' or 'K', got {axis!r}")
    pca = pca if pca is not None else training_pca(dataset)
    records, entries = [], []
    for v in values:
        rec = train(replace(base, **{field_name: type(getattr(base, field_name))(v)}), dataset, db, pca)
        records.append(rec)
        agg = rec.metrics.aggregate()["overall"]
        entries.append({
            "value": v,
            "final_selected": rec.final_selected,
            "val_selected": rec.val_selected,
            "best_val": rec.best_val,
            "metrics_mean": {m: agg[m]["mean"] for m in METRIC_NAMES},
            "fingerprint": rec.fingerprint(),
        })
    return {"schema_version": 1, "axis": field_name, "base": asdict(base), "runs": entries}, records


# -- selection overlap ------------------------------------------------------------


@dataclass
class JaccardAnalysis:
    matrix: JaccardMatrix
    repeat_overlap: dict   # cell type -> mean Jaccard between two noise seeds
    top_n: int
    queries: list

    @property
    def off_diagonal_mean(self) -> float:
        return self.matrix.off_diagonal_mean()

    @property
    def repeat_mean(self) -> float:
        return float(np.mean(list(self.repeat_overlap.values())))

    def to_dict(self) -> dict:
        return {"schema_version": 1, "top_n": self.top_n, "queries": self.queries,
                **self.matrix.to_dict(), "off_diagonal_mean": self.off_diagonal_mean,
                "repeat_overlap": self.repeat_overlap, "repeat_mean": self.repeat_mean}


def selection_sets(model: PerturbationModel, dataset: list[Sample], db: PerturbationDB,
                   config: TrainConfig, queries: list, top_n: int, noise_seed: int,
                   passes: int = 64) -> dict:
    """cell type -> query -> top-N candidate ids by hard-mask frequency."""
    if model.kind != "pt_rag":
        raise ValueError("selection analysis needs a pt_rag model")
    wanted = set(queries)
    samples = [s for s in dataset if s.pert_id in wanted]
    arr = stack(samples, db)
    runner = _Runner(model, db, config.K)
    with ad.no_grad():
        logits = model.selection_logits(runner.batch(arr, np.arange(len(arr)))).data
    # the hard mask depends on the generator only through these logits, so
    # repeated passes redraw the noise without rerunning the network
    rng = np.random.default_rng([noise_seed, 5])
    counts = np.zeros(logits.shape[0:1] + logits.shape[2:3], dtype=np.int64)   # [N, K]
    for _ in range(passes):
        g = sample_gumbel(logits.shape, rng)
        y = logits + g
        counts += (y[..., INCLUDE] >= y[..., EXCLUDE]).sum(axis=1)
    if not np.any(counts):
        raise ValueError("every selection mask is empty; the checkpoint is non-selective "
                         "(retune lambda_sparse)")
    out: dict = {}
    for i in range(len(arr)):
        cand = runner.candidates[arr.query[i]]
        chosen = top_n_from_counts(counts[i], top_n)
        out.setdefault(arr.cell_types[i], {})[arr.pert_ids[i]] = {db.ids[cand[j]] for j in chosen}
    return out


def jaccard_analysis(model: PerturbationModel, dataset: list[Sample], db: PerturbationDB,
                     config: TrainConfig, top_n: int = 5, split: str = "test",
                     noise_seeds: tuple[int, int] = (0, 1), passes: int = 64) -> JaccardAnalysis:
    """Cross-cell-type overlap of the most frequently selected candidates.

    Queries are the perturbation ids of ``split``; each is run in every cell type.
    """
    queries = sorted({s.pert_id for s in select_split(dataset, split)})
    if not queries:
        raise ValueError(f"split {split!r} is empty")
    types = sorted({s.cell_type for s in dataset})
    covered = [q for q in queries
               if all(any(s.pert_id == q and s.cell_type == t for s in dataset) for t in types)]
    sets_a = selection_sets(model, dataset, db, config, covered, top_n, noise_seeds[0], passes)
    sets_b = selection_sets(model, dataset, db, config, covered, top_n, noise_seeds[1], passes)
    matrix = jaccard_overlap(sets_a)
    repeat = {}
    for t in types:
        scores = [j for q in covered if (j := jaccard(sets_a[t][q], sets_b[t][q])) is not None]
        repeat[t] = float(np.mean(scores)) if scores else 0.0
    return JaccardAnalysis(matrix, repeat, top_n, covered)
