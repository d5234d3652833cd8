"""Generation baseline, cross-attention RAG and two-stage selective RAG models."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .metrics import energy_distance_tensor
from .nn import LayerNorm, Linear, MLP, Module, MultiHeadAttention, TransformerGenerator
from .retrieval import PerturbationDB, top_k
from .selector import SelectionMask, gumbel_softmax_select

MODEL_KINDS = ("state", "state_genept", "vanilla_rag", "pt_rag")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    G: int = 60
    E: int = 32
    K: int = 16
    tau: float = 0.5
    lambda_sparse: float = 0.1
    depth: int = 2
    heads: int = 4
    seed: int = 0
    score_hidden: int = 128
    proj_hidden: int = 128
    n_perts: int = 0  # one-hot width for the identity-encoded baseline

    def to_dict(self) -> dict:
        return asdict(self)


class FrozenCellEncoder:
    """Fixed seeded linear projection ``G -> d``; never trained."""

    def __init__(self, n_genes: int, dim: int, seed: int):
        rng = np.random.default_rng([seed, 0xCE11])
        proj = rng.normal(0.0, 1.0 / math.sqrt(n_genes), (n_genes, dim))
        proj.setflags(write=False)
        self.projection = proj

    def __call__(self, x) -> Tensor:
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.projection.shape[0]:
            raise ShapeError(f"cell encoder expects {self.projection.shape[0]} genes, got {x.shape}")
        return Tensor(x @ self.projection)


@dataclass
class Batch:
    """Stacked inputs for ``B`` samples.

    ``pert_input`` is the query embedding ``[B, E]`` or one-hot ``[B, P]``;
    ``context`` holds retrieved candidate embeddings ``[B, K, E]`` when used.
    """

    x_ctrl: np.ndarray
    pert_input: np.ndarray
    context: np.ndarray | None = None
    x_pert: np.ndarray | None = None
    candidates: np.ndarray | None = None


class PerturbationModel(Module):
    kind = "state"

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.cell_encoder = FrozenCellEncoder(config.G, config.d, config.seed)
        width = config.n_perts if self.kind == "state" else config.E
        if width < 1:
            raise ValueError(f"{self.kind}: perturbation input width must be >= 1")
        self.pert_encoder = Linear(width, config.d, rng)
        self._build(rng)
        self.generator = TransformerGenerator(config.d, config.G, config.depth, config.heads, rng)

    def _build(self, rng):
        pass

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor]:
        return self.cell_encoder(batch.x_ctrl), self.pert_encoder(batch.pert_input)

    def forward(self, batch: Batch, rng=None, **kw) -> tuple[Tensor, SelectionMask | None]:
        h_ctrl, h_pert = self.encode(batch)
        z = ad.add(h_ctrl, ad.reshape(h_pert, h_pert.shape[:-1] + (1, h_pert.shape[-1])))
        return self.generator(z), None


class StateModel(PerturbationModel):
    """Frozen cell encoding plus perturbation encoding, summed and generated."""

    def __init__(self, config: ModelConfig, kind: str = "state_genept"):
        if kind not in ("state", "state_genept"):
            raise ValueError(kind)
        self.kind = kind
        super().__init__(config)


class VanillaRAG(PerturbationModel):
    """Fixed top-K context fused by cross-attention; attention output replaces z."""

    kind = "vanilla_rag"

    def _build(self, rng):
        self.attention = MultiHeadAttention(self.config.d, self.config.heads, rng)

    def forward(self, batch: Batch, rng=None, **kw):
        if batch.context is None or batch.context.shape[-2] == 0:
            raise ShapeError("empty context")
        h_ctrl, h_pert = self.encode(batch)
        h_cxt = self.pert_encoder(batch.context)
        q = ad.add(h_ctrl, ad.reshape(h_pert, h_pert.shape[:-1] + (1, h_pert.shape[-1])))
        return self.generator(self.attention(q, h_cxt)), None


class PTRAG(PerturbationModel):
    """Cell-conditioned straight-through selection over retrieved candidates."""

    kind = "pt_rag"

    def _build(self, rng):
        d = self.config.d
        self.triplet_norm = LayerNorm(3 * d)
        self.score_mlp = MLP([3 * d, self.config.score_hidden, 2], rng)
        self.proj = MLP([3 * d, self.config.proj_hidden, d], rng)

    def triplets(self, batch: Batch) -> Tensor:
        """``[B, S, K, 3d]`` concatenation of cell, query and candidate encodings."""
        if batch.context is None or batch.context.shape[-2] == 0:
            raise ShapeError("empty context")
        h_ctrl, h_pert = self.encode(batch)
        h_cxt = self.pert_encoder(batch.context)
        B, S, d = h_ctrl.shape
        K = h_cxt.shape[-2]
        full = (B, S, K, d)
        parts = [
            ad.broadcast_to(ad.reshape(h_ctrl, (B, S, 1, d)), full),
            ad.broadcast_to(ad.reshape(h_pert, (B, 1, 1, d)), full),
            ad.broadcast_to(ad.reshape(h_cxt, (B, 1, K, d)), full),
        ]
        return ad.concat(parts, axis=-1)

    def selection_logits(self, batch: Batch) -> Tensor:
        """``[B, S, K, 2]`` exclude/include logits."""
        return self.score_mlp(self.triplet_norm(self.triplets(batch)))

    def forward(self, batch: Batch, rng=None, *, noise=None, deterministic_noise: bool = False,
                force_mask=None, relaxed: bool = False):
        """Returns ``(prediction, mask)``.

        ``force_mask`` replaces the selection weights with a fixed ``[B, S, K]``
        array; ``relaxed`` uses the soft include probability as the weight (the
        differentiable surrogate network) instead of the straight-through value.
        """
        c = self.triplets(batch)
        logits = self.score_mlp(self.triplet_norm(c))
        mask = gumbel_softmax_select(logits, self.config.tau, rng,
                                     deterministic_noise=deterministic_noise, noise=noise)
        if force_mask is not None:
            w = Tensor(np.broadcast_to(np.asarray(force_mask, dtype=np.float64), mask.hard.shape))
            mask = SelectionMask(w.data.copy(), mask.soft, mask.tau, w, mask.noise)
        weights = ad.index(ad.softmax(ad.scale(ad.add(logits, mask.noise), 1.0 / mask.tau)),
                           (Ellipsis, 1)) if relaxed else mask.weights
        h = self.proj(c)
        w4 = ad.reshape(weights, weights.shape + (1,))
        z = ad.sum_axis(ad.mul(w4, h), axis=-2)
        return self.generator(z), mask


def build_model(kind: str, config: ModelConfig) -> PerturbationModel:
    if kind in ("state", "state_genept"):
        return StateModel(config, kind)
    if kind == "vanilla_rag":
        return VanillaRAG(config)
    if kind == "pt_rag":
        return PTRAG(config)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


# -- single-sample entry points ----------------------------------------------


def _context(db: PerturbationDB, query_id: str, k: int) -> tuple[np.ndarray, np.ndarray]:
    res = top_k(db, query_id, k)
    return db.embeddings[res.candidate_indices], res.candidate_indices


def _single_batch(x_ctrl, pert_embedding, context=None, candidates=None) -> Batch:
    x = np.asarray(x_ctrl, dtype=np.float64)
    e = np.asarray(pert_embedding, dtype=np.float64)
    if x.ndim != 2 or e.ndim != 1:
        raise ShapeError(f"expected x_ctrl [S, G] and embedding [E], got {x.shape} and {e.shape}")
    ctx = None if context is None else np.asarray(context)[None]
    return Batch(x[None], e[None], ctx, candidates=None if candidates is None else candidates[None])


def forward_state(model: StateModel, x_ctrl, pert_embedding) -> Tensor:
    pred, _ = model.forward(_single_batch(x_ctrl, pert_embedding))
    return ad.reshape(pred, pred.shape[1:])


def forward_vanilla_rag(model: VanillaRAG, x_ctrl, query_id: str, db: PerturbationDB, k: int) -> Tensor:
    ctx, cand = _context(db, query_id, k)
    batch = _single_batch(x_ctrl, db.embeddings[db.index_of(query_id)], ctx, cand)
    pred, _ = model.forward(batch)
    return ad.reshape(pred, pred.shape[1:])


def forward_pt_rag(model: PTRAG, x_ctrl, query_id: str, db: PerturbationDB, k: int,
                   rng=None, **kw) -> tuple[Tensor, SelectionMask]:
    ctx, cand = _context(db, query_id, k)
    batch = _single_batch(x_ctrl, db.embeddings[db.index_of(query_id)], ctx, cand)
    pred, mask = model.forward(batch, rng, **kw)
    return ad.reshape(pred, pred.shape[1:]), mask


# -- objective ---------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: float
    dist: float
    sparse: float
    selected_count: float
    tensor: Tensor = field(repr=False, compare=False, default=None)


def loss(prediction, target, mask: SelectionMask | None = None, lambda_sparse: float = 0.0) -> LossBreakdown:
    """Energy distance (batch mean) plus ``lambda_sparse`` times the mean selection weight."""
    prediction = ad.as_tensor(prediction)
    target = ad.as_tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    if prediction.shape[-2] < 2:
        raise ValueError("energy loss needs at least 2 cells per population")
    dist = ad.mean(energy_distance_tensor(prediction, target))
    if mask is None:
        sparse = Tensor(0.0)
        selected = 0.0
    else:
        sparse = ad.mean(mask.weights)
        selected = mask.selected_count
    total = ad.add(dist, ad.scale(sparse, lambda_sparse))
    return LossBreakdown(total.item(), dist.item(), sparse.item(), selected, total)
