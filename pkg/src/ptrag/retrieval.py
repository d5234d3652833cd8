"""Perturbation embedding database and exact top-K cosine retrieval."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PerturbationDB:
    ids: tuple[str, ...]
    embeddings: np.ndarray  # [P, E], unit-norm rows
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {pid: i for i, pid in enumerate(self.ids)})
        self.embeddings.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index_of(self, pert_id: str) -> int:
        try:
            return self._index[pert_id]
        except KeyError:
            raise KeyError(f"unknown perturbation id {pert_id!r}") from None

    def __contains__(self, pert_id) -> bool:
        return pert_id in self._index


@dataclass(frozen=True)
class RetrievalResult:
    candidate_indices: np.ndarray
    similarities: np.ndarray


def build_db(ids, raw_embeddings) -> PerturbationDB:
    ids = tuple(str(i) for i in ids)
    raw = np.array(raw_embeddings, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] != len(ids):
        raise ValueError(f"expected {len(ids)} embedding rows, got array of shape {raw.shape}")
    if len(ids) < 2:
        raise ValueError("a perturbation database needs at least 2 entries")
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate perturbation ids: {dup}")
    norms = np.sqrt((raw * raw).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero-norm embedding for id {ids[zero[0]]!r}")
    return PerturbationDB(ids, raw / norms[:, None])


def top_k(db: PerturbationDB, query_id: str, k: int) -> RetrievalResult:
    """The ``k`` most similar entries to ``query_id``, excluding the query itself.

    Ties are broken by ascending database index.
    """
    q = db.index_of(query_id)
    if not 1 <= k <= db.size - 1:
        raise ValueError(f"K={k} outside [1, {db.size - 1}]")
    sims = db.embeddings @ db.embeddings[q]
    order = np.argsort(-sims, kind="stable")
    order = order[order != q][:k]
    return RetrievalResult(order, sims[order])


def top_k_table(db: PerturbationDB, k: int) -> np.ndarray:
    """``[P, k]`` candidate indices for every query in database order."""
    return np.stack([top_k(db, pid, k).candidate_indices for pid in db.ids])


def write_db_csv(path, ids, embeddings) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"e{j}" for j in range(emb.shape[1])])
        for pid, row in zip(ids, emb):
            w.writerow([pid] + [repr(float(x)) for x in row])


def read_db_csv(path) -> PerturbationDB:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "id":
        raise ValueError(f"{path}: expected header starting with 'id'")
    ids = [r[0] for r in rows[1:]]
    raw = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return build_db(ids, raw)
