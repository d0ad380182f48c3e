"""Interpretability tooling: prototype projection, explanations, 2D maps.

Prototypes are made human-readable by projecting each one onto the training
sample whose embedding is most similar (cosine by default). Decisions are
explained exactly: because the output layer is linear, the logits decompose
into one contribution per attention edge plus the bias, with zero residual.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingDataset
from .errors import NumericalError
from .model import ModelConfig, ModelParams, forward


@dataclass
class ProjectionResult:
    """Per-prototype nearest training sample under the chosen similarity."""

    matched_indices: np.ndarray          # (M,) sample index per prototype
    similarities: np.ndarray             # (M,)
    matched_texts: list[str] | None      # present when the dataset carries texts
    distinguishness: float               # |unique matched indices| / M
    metric: str

    def to_dict(self) -> dict:
        prototypes = []
        for j in range(len(self.matched_indices)):
            entry = {
                "prototype": j,
                "matched_index": int(self.matched_indices[j]),
                "similarity": float(self.similarities[j]),
            }
            if self.matched_texts is not None:
                entry["text"] = self.matched_texts[j]
            prototypes.append(entry)
        return {
            "metric": self.metric,
            "distinguishness": self.distinguishness,
            "prototypes": prototypes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarities between rows of a and rows of b; zero-norm rows
    score 0 against everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        an = np.where(na[:, None] > 0.0, a / na[:, None], 0.0)
        bn = np.where(nb[:, None] > 0.0, b / nb[:, None], 0.0)
    return an @ bn.T


def project_prototypes(params: ModelParams, dataset: EmbeddingDataset,
                       metric: str = "cosine") -> ProjectionResult:
    """Match each prototype to its most similar training sample.

    ``metric`` is "cosine" (default) or "neg_euclidean" (argmin of Euclidean
    distance, reported as its negation). Ties go to the lowest sample index.
    """
    if dataset.dim != params.prototypes.shape[1]:
        raise ValueError(f"dataset dim {dataset.dim} != prototype dim "
                         f"{params.prototypes.shape[1]}")
    emb = dataset.embeddings.astype(np.float64)
    if metric == "cosine":
        sims = _cosine_matrix(params.prototypes, emb)       # (M, N)
    elif metric == "neg_euclidean":
        diffs = params.prototypes[:, None, :] - emb[None, :, :]
        sims = -np.sqrt((diffs ** 2).sum(axis=2))
    else:
        raise ValueError(f"unknown similarity metric {metric!r}")
    matched = np.argmax(sims, axis=1)
    m = params.prototypes.shape[0]
    texts = None
    if dataset.texts is not None:
        texts = [dataset.texts[i] for i in matched]
    return ProjectionResult(
        matched_indices=matched,
        similarities=sims[np.arange(m), matched],
        matched_texts=texts,
        distinguishness=len(np.unique(matched)) / m,
        metric=metric,
    )


def distinguishness(projection: ProjectionResult) -> float:
    """Fraction of prototypes whose projected samples are unique."""
    m = len(projection.matched_indices)
    return len(np.unique(projection.matched_indices)) / m


def orthogonality(params: ModelParams) -> float:
    """Mean |cosine similarity| over unordered prototype pairs; lower is better."""
    m = params.prototypes.shape[0]
    if m < 2:
        raise ValueError("orthogonality needs at least 2 prototypes")
    cos = _cosine_matrix(params.prototypes, params.prototypes)
    iu = np.triu_indices(m, k=1)
    return float(np.abs(cos[iu]).mean())


@dataclass
class EdgeAttribution:
    """One attention edge and its exact per-class logit contribution."""

    head: int
    prototype: int
    alpha: float
    gamma: float
    fallback: bool
    contribution: np.ndarray     # (C,)


@dataclass
class ExplanationReport:
    prediction: int
    probs: np.ndarray
    logits: np.ndarray
    bias: np.ndarray
    edges: list[list[EdgeAttribution]]           # grouped per head
    prototype_matches: dict[int, int]            # referenced prototype -> sample index
    prototype_similarities: dict[int, float]
    prototype_texts: dict[int, str] | None
    text: str | None = None
    sample_index: int | None = None

    def to_dict(self) -> dict:
        heads = []
        for i, head_edges in enumerate(self.edges):
            heads.append({
                "head": i,
                "fallback": bool(head_edges[0].fallback) if head_edges else False,
                "edges": [{
                    "prototype": e.prototype,
                    "alpha": e.alpha,
                    "gamma": e.gamma,
                    "contribution": [float(c) for c in e.contribution],
                } for e in head_edges],
            })
        prototypes = {}
        for j in sorted(self.prototype_matches):
            entry = {
                "matched_index": self.prototype_matches[j],
                "similarity": self.prototype_similarities[j],
            }
            if self.prototype_texts is not None:
                entry["text"] = self.prototype_texts.get(j)
            prototypes[str(j)] = entry
        return {
            "prediction": self.prediction,
            "probs": [float(p) for p in self.probs],
            "logits": [float(v) for v in self.logits],
            "bias": [float(b) for b in self.bias],
            "heads": heads,
            "prototypes": prototypes,
            "text": self.text,
            "sample_index": self.sample_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)


def explain(params: ModelParams, config: ModelConfig, s: np.ndarray,
            projection: ProjectionResult, text: str | None = None,
            sample_index: int | None = None) -> ExplanationReport:
    """Explain one decision as attention edges with exact logit attributions.

    Each edge (head i, prototype j) contributes gamma_ij * W_i k_ij to the
    logits, where W_i is the output-weight slice of head i. Contributions plus
    the bias reconstruct the logits; a residual above 1e-6 raises.
    """
    trace = forward(params, config, s)
    dk = config.head_dim
    edges: list[list[EdgeAttribution]] = []
    referenced: set[int] = set()
    for i, head in enumerate(trace.heads):
        w_slice = params.out_weight[:, i * dk:(i + 1) * dk]   # (C, d_k)
        head_edges = []
        for pos, j in enumerate(head.neighborhood):
            gamma = float(head.gammas[pos])
            contribution = gamma * (w_slice @ head.keys[j])
            head_edges.append(EdgeAttribution(
                head=i, prototype=int(j), alpha=float(head.alphas[j]),
                gamma=gamma, fallback=head.fallback_used,
                contribution=contribution))
            referenced.add(int(j))
        edges.append(head_edges)

    recon = params.out_bias.copy()
    for head_edges in edges:
        for e in head_edges:
            recon = recon + e.contribution
    residual = float(np.max(np.abs(recon - trace.logits)))
    if residual > 1e-6:
        raise NumericalError(
            f"edge contributions fail to reconstruct the logits (residual {residual:.3e})")

    matches = {j: int(projection.matched_indices[j]) for j in referenced}
    sims = {j: float(projection.similarities[j]) for j in referenced}
    texts = None
    if projection.matched_texts is not None:
        texts = {j: projection.matched_texts[j] for j in referenced}
    return ExplanationReport(
        prediction=int(np.argmax(trace.probs)), probs=trace.probs,
        logits=trace.logits, bias=params.out_bias.copy(), edges=edges,
        prototype_matches=matches, prototype_similarities=sims,
        prototype_texts=texts, text=text, sample_index=sample_index)


@dataclass
class EmbeddingMap2D:
    """2D coordinates for a mixed set of sample and prototype points."""

    coords: np.ndarray            # (n, 2)
    roles: list[str]              # "sample" | "prototype"
    indices: np.ndarray           # index within the point's own role
    labels: np.ndarray            # class label for samples, -1 for prototypes

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["x", "y", "role", "index", "label"])
            for i in range(len(self.roles)):
                writer.writerow([repr(float(self.coords[i, 0])),
                                 repr(float(self.coords[i, 1])),
                                 self.roles[i], int(self.indices[i]),
                                 int(self.labels[i])])


def _perplexity_probabilities(sq_dists: np.ndarray, perplexity: float,
                              tol: float = 1e-5, max_steps: int = 50) -> np.ndarray:
    """Row-wise conditional Gaussians with entropy binary-searched to
    log(perplexity). Diagonal stays zero."""
    n = sq_dists.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        beta_min, beta_max = -np.inf, np.inf
        beta = 1.0
        di = np.delete(sq_dists[i], i)
        for _ in range(max_steps):
            expd = np.exp(-di * beta)
            sum_e = expd.sum()
            if sum_e <= 0:
                sum_e = np.finfo(float).tiny
            entropy = np.log(sum_e) + beta * (di * expd).sum() / sum_e
            diff = entropy - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                beta_min = beta
                beta = beta * 2.0 if beta_max == np.inf else (beta + beta_max) / 2.0
            else:
                beta_max = beta
                beta = beta / 2.0 if beta_min == -np.inf else (beta + beta_min) / 2.0
        row = expd / sum_e
        P[i, np.arange(n) != i] = row
    return P


def tsne_embed(points: np.ndarray, perplexity: float = 30.0,
               iterations: int = 500, seed: int = 0,
               roles: list[str] | None = None,
               indices: np.ndarray | None = None,
               labels: np.ndarray | None = None) -> EmbeddingMap2D:
    """Exact (quadratic) t-SNE to 2 dimensions, deterministic given the seed.

    Gaussian conditionals are binary-searched to the target perplexity and
    symmetrized; the map is optimized by momentum gradient descent (learning
    rate 200, momentum 0.5 switching to 0.8 after iteration 250) with early
    exaggeration factor 12 for the first 250 iterations.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if n <= 3 * perplexity:
        raise ValueError(f"need more than {3 * perplexity:.0f} points for "
                         f"perplexity {perplexity}, have {n}")
    if iterations < 1:
        raise ValueError("iterations must be positive")

    sq_norms = (X ** 2).sum(axis=1)
    sq_dists = np.maximum(sq_norms[:, None] - 2.0 * X @ X.T + sq_norms[None, :], 0.0)
    np.fill_diagonal(sq_dists, 0.0)

    P = _perplexity_probabilities(sq_dists, perplexity)
    P = (P + P.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(Y)
    exaggeration_until = 250
    momentum_switch = 250

    for it in range(iterations):
        P_eff = P * 12.0 if it < exaggeration_until else P
        ysq = (Y ** 2).sum(axis=1)
        num = 1.0 / (1.0 + ysq[:, None] - 2.0 * Y @ Y.T + ysq[None, :])
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        PQn = (P_eff - Q) * num
        grad = 4.0 * ((np.diag(PQn.sum(axis=1)) - PQn) @ Y)
        momentum = 0.5 if it < momentum_switch else 0.8
        update = momentum * update - 200.0 * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)

    if roles is None:
        roles = ["sample"] * n
    if indices is None:
        indices = np.arange(n)
    if labels is None:
        labels = np.full(n, -1, dtype=np.int64)
    if not (len(roles) == len(indices) == len(labels) == n):
        raise ValueError("roles/indices/labels must match the point count")
    if not np.all(np.isfinite(Y)):
        raise NumericalError("t-SNE produced non-finite coordinates")
    return EmbeddingMap2D(coords=Y, roles=list(roles),
                          indices=np.asarray(indices, dtype=np.int64),
                          labels=np.asarray(labels, dtype=np.int64))
