"""Seeded Perturb-seq-like data where perturbation effects depend on cell type.

Each cell type ``c`` has a baseline mean ``mu_c``, pathway signatures ``A_c``
(``m x G``) and a binary mask ``b_c`` of active pathways.  Perturbation ``p``
has pathway loadings ``v_p`` and embedding ``[v_p; r_p]`` where ``r_p`` is a
nuisance block.  The mean shift of ``p`` in ``c`` is ``(b_c * v_p) @ A_c``, so
embedding neighbours that share an active pathway are informative and those
sharing only masked pathways are distractors.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .retrieval import PerturbationDB, build_db, read_db_csv, write_db_csv

SPLITS = ("train", "val", "test")
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SyntheticConfig:
    G: int = 60
    E: int = 32
    P: int = 120
    C: int = 4
    m: int = 8
    S: int = 16
    noise_sigma: float = 0.5
    seed: int = 0
    active_prob: float = 0.5
    type_specificity: float = 0.5
    gene_density: float = 0.25
    effect_scale: float = 1.0
    secondary_scale: float = 0.2
    nuisance_scale: float = 0.4

    def validate(self) -> None:
        for name in ("G", "E", "P", "C", "m", "S"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m > self.E:
            raise ValueError(f"m={self.m} must be <= E={self.E}")
        if self.P < 2:
            raise ValueError("P must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for name in ("active_prob", "type_specificity", "gene_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class Sample:
    x_ctrl: np.ndarray
    x_pert: np.ndarray
    pert_id: str
    cell_type: str
    split: str = "train"


@dataclass
class GroundTruth:
    pert_ids: list
    cell_types: list
    mu: np.ndarray          # [C, G]
    signatures: np.ndarray  # [C, m, G]
    masks: np.ndarray       # [C, m]
    loadings: np.ndarray    # [P, m]
    nuisance: np.ndarray    # [P, E - m]
    raw_embeddings: np.ndarray

    def delta(self, p: int, c: int) -> np.ndarray:
        return response_shift(self.loadings[p], self.masks[c], self.signatures[c])


def response_shift(loading, mask, signature) -> np.ndarray:
    return (np.asarray(mask) * np.asarray(loading)) @ np.asarray(signature)


def generate(config: SyntheticConfig = SyntheticConfig(), *, masks=None, loadings=None,
             signatures=None) -> tuple[list[Sample], PerturbationDB, GroundTruth]:
    """Build every (perturbation, cell type) sample.  Keyword arrays override the
    corresponding random draws (used to construct degenerate cases)."""
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    pert_ids = [f"P{i:04d}" for i in range(cfg.P)]
    cell_types = [f"T{c}" for c in range(cfg.C)]

    mu = rng.normal(0.0, 1.0, (cfg.C, cfg.G))
    support = rng.random((cfg.m, cfg.G)) < cfg.gene_density
    shared = rng.normal(0.0, 1.0, (cfg.m, cfg.G)) * support
    specific = rng.normal(0.0, 1.0, (cfg.C, cfg.m, cfg.G)) * support
    rho = cfg.type_specificity
    sig = math.sqrt(1.0 - rho * rho) * shared[None] + rho * specific

    b = (rng.random((cfg.C, cfg.m)) < cfg.active_prob).astype(np.float64)
    for c in range(cfg.C):
        if not b[c].any():
            b[c, rng.integers(cfg.m)] = 1.0

    primary = rng.integers(cfg.m, size=cfg.P)
    sign = np.where(rng.random(cfg.P) < 0.5, -1.0, 1.0)
    magnitude = cfg.effect_scale * (1.0 + rng.random(cfg.P))
    v = rng.normal(0.0, cfg.secondary_scale, (cfg.P, cfg.m))
    v[np.arange(cfg.P), primary] = sign * magnitude
    r = rng.normal(0.0, cfg.nuisance_scale, (cfg.P, cfg.E - cfg.m))

    if masks is not None:
        b = np.asarray(masks, dtype=np.float64).reshape(cfg.C, cfg.m)
    if loadings is not None:
        v = np.asarray(loadings, dtype=np.float64).reshape(cfg.P, cfg.m)
    if signatures is not None:
        sig = np.asarray(signatures, dtype=np.float64).reshape(cfg.C, cfg.m, cfg.G)

    raw = np.concatenate([v, r], axis=1)
    # an all-zero embedding row cannot be normalised; nudge it deterministically
    zero_rows = np.flatnonzero(~raw.any(axis=1))
    raw[zero_rows, -1] = 1.0

    samples = []
    for c, ct in enumerate(cell_types):
        for p, pid in enumerate(pert_ids):
            x_ctrl = mu[c] + cfg.noise_sigma * rng.normal(0.0, 1.0, (cfg.S, cfg.G))
            shift = response_shift(v[p], b[c], sig[c])
            x_pert = x_ctrl + shift + cfg.noise_sigma * rng.normal(0.0, 1.0, (cfg.S, cfg.G))
            samples.append(Sample(x_ctrl, x_pert, pid, ct))
    truth = GroundTruth(pert_ids, cell_types, mu, sig, b, v, r, raw)
    return samples, build_db(pert_ids, raw), truth


# -- splitting ---------------------------------------------------------------


class SplitMix64:
    """Portable 64-bit generator (Steele, Lea & Flood's splitmix64)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates from the back; index drawn as ``next() % (i + 1)``."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.next() % (i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def split_fewshot(dataset: list[Sample], target_cell_type: str, fewshot_fraction: float = 0.3,
                  val_fraction: float = 0.5, seed: int = 0) -> list[Sample]:
    """Label splits for the few-shot cross-cell-type protocol.

    Non-target cell types go to train.  Target perturbation ids (sorted, then
    shuffled by splitmix64) contribute ``floor(fewshot_fraction * n)`` to
    train; of the rest ``floor(val_fraction * rest)`` go to val, the others to test.
    """
    if not 0.0 < fewshot_fraction < 1.0:
        raise ValueError("fewshot_fraction must lie in (0, 1)")
    if not 0.0 <= val_fraction <= 1.0:
        raise ValueError("val_fraction must lie in [0, 1]")
    target_ids = sorted({s.pert_id for s in dataset if s.cell_type == target_cell_type})
    if not target_ids:
        raise ValueError(f"target cell type {target_cell_type!r} absent from dataset")
    order = SplitMix64(seed).shuffle(target_ids)
    n_train = math.floor(fewshot_fraction * len(order))
    rest = order[n_train:]
    n_val = math.floor(val_fraction * len(rest))
    assign = {pid: "train" for pid in order[:n_train]}
    assign.update({pid: "val" for pid in rest[:n_val]})
    assign.update({pid: "test" for pid in rest[n_val:]})
    return [replace(s, split=assign[s.pert_id] if s.cell_type == target_cell_type else "train")
            for s in dataset]


def split_assignments(dataset: list[Sample]) -> dict:
    return {f"{s.cell_type}/{s.pert_id}": s.split for s in dataset}


# -- files -------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_matrix(path: Path, samples: list[Sample], attr: str) -> None:
    g = getattr(samples[0], attr).shape[1]
    blocks = []
    for i, s in enumerate(samples):
        x = getattr(s, attr)
        idx = np.column_stack([np.full(len(x), i), np.arange(len(x))])
        blocks.append(np.column_stack([idx, x]))
    header = ",".join(["sample", "cell"] + [f"g{j}" for j in range(g)])
    fmt = ["%d", "%d"] + ["%.17g"] * g
    np.savetxt(path, np.concatenate(blocks), delimiter=",", header=header, comments="", fmt=fmt)


def _read_matrix(path: Path, n_samples: int) -> list[np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    sample = arr[:, 0].astype(np.int64)
    return [arr[sample == i, 2:] for i in range(n_samples)]


def write_dataset(out_dir, samples: list[Sample], ids, raw_embeddings, config: SyntheticConfig,
                  extra: dict | None = None) -> dict:
    """Write ``x_ctrl.csv``, ``x_pert.csv``, ``embeddings.csv`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "x_ctrl.csv", samples, "x_ctrl")
    _write_matrix(out / "x_pert.csv", samples, "x_pert")
    write_db_csv(out / "embeddings.csv", ids, raw_embeddings)
    files = ("x_ctrl.csv", "x_pert.csv", "embeddings.csv")
    manifest = {
        "schema_version": 1,
        "config": asdict(config),
        "samples": [{"pert_id": s.pert_id, "cell_type": s.cell_type, "split": s.split}
                    for s in samples],
        "splits": split_assignments(samples),
        "checksums": {f: _sha256(out / f) for f in files},
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_dataset(in_dir, verify: bool = True) -> tuple[list[Sample], PerturbationDB, dict]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if verify:
        for name, digest in manifest["checksums"].items():
            if _sha256(src / name) != digest:
                raise ValueError(f"{src / name}: checksum mismatch")
    meta = manifest["samples"]
    ctrl = _read_matrix(src / "x_ctrl.csv", len(meta))
    pert = _read_matrix(src / "x_pert.csv", len(meta))
    samples = [Sample(c, p, m["pert_id"], m["cell_type"], m["split"])
               for c, p, m in zip(ctrl, pert, meta)]
    return samples, read_db_csv(src / "embeddings.csv"), manifest


def config_from_dict(d: dict) -> SyntheticConfig:
    known = {f for f in SyntheticConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown synthetic config keys: {sorted(unknown)}")
    cfg = SyntheticConfig(**d)
    cfg.validate()
    return cfg


__all__ = ["SyntheticConfig", "Sample", "GroundTruth", "generate", "split_fewshot", "SplitMix64",
           "write_dataset", "read_dataset", "response_shift", "SPLITS", "config_from_dict"]
