"""Composite loss, exact reverse-mode gradients, finite-difference checking, Adam.

The objective combines three parts:

    total = lambda1 * acc + lambda2 * prox + lambda3 * div

where ``acc`` is summed cross-entropy over the batch, ``prox`` is the mean
squared distance from each prototype to its nearest training embedding, and
``div`` is the negated mean pairwise prototype distance (ordered pairs).

Differentiation conventions, matched by the finite-difference checker:
  * the per-head neighborhood is frozen at its forward-pass value, so no
    gradient flows through the threshold comparison, while alpha, gamma, keys
    and queries of neighborhood members carry full gradients;
  * the proximity term routes gradient only through each prototype's argmin
    sample (ties to the lowest sample index);
  * coincident prototypes contribute zero diversity gradient.

The training loop accumulates summed cross-entropy gradients over the
micro-batches of one accumulation round, divides by the round's sample count,
then adds the proximity/diversity gradients once. This makes the update of one
batch of size b identical to b accumulated singleton micro-batches and keeps
the learning rate's meaning independent of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import EmbeddingDataset
from .errors import NumericalError
from .model import (BatchTrace, ModelConfig, ModelParams, forward_batch,
                    init_params, predict_batch)

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    acc: float
    prox: float
    div: float
    total: float
    prox_argmins: np.ndarray | None = None   # nearest training sample per prototype


@dataclass
class GradientSet:
    """Gradients mirroring every ModelParams tensor shape-for-shape."""

    prototypes: np.ndarray
    wq: list[np.ndarray]
    wk: list[np.ndarray]
    out_weight: np.ndarray
    out_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSet":
        return cls(prototypes=np.zeros_like(params.prototypes),
                   wq=[np.zeros_like(w) for w in params.wq],
                   wk=[np.zeros_like(w) for w in params.wk],
                   out_weight=np.zeros_like(params.out_weight),
                   out_bias=np.zeros_like(params.out_bias))

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("prototypes", self.prototypes)]
        out += [(f"wq.{i}", w) for i, w in enumerate(self.wq)]
        out += [(f"wk.{i}", w) for i, w in enumerate(self.wk)]
        out += [("out_weight", self.out_weight), ("out_bias", self.out_bias)]
        return out

    def add_scaled(self, other: "GradientSet", scale: float) -> None:
        for (_, mine), (_, theirs) in zip(self.tensors(), other.tensors()):
            mine += scale * theirs

    def scale(self, factor: float) -> None:
        for _, t in self.tensors():
            t *= factor

    def check_finite(self) -> None:
        for name, t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise NumericalError(f"non-finite gradient in tensor {name!r}")


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-4
    batch_size: int = 4
    accum_steps: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    prox_over_full_set: bool = True   # False: proximity min over the round's samples only

    def __post_init__(self):
        for name in ("epochs", "batch_size", "accum_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class AdamState:
    t: int
    m: GradientSet
    v: GradientSet

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(t=0, m=GradientSet.zeros_like(params),
                   v=GradientSet.zeros_like(params))


def loss_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Summed cross-entropy -sum_i log probs[i, labels[i]] over the batch."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.log(picked).sum())


def loss_proximity(prototypes: np.ndarray,
                   embeddings: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over prototypes of the squared distance to the nearest embedding.

    Returns the loss and the per-prototype argmin sample index (ties to the
    lowest index).
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        raise ValueError("proximity loss needs at least one embedding row")
    m = prototypes.shape[0]
    argmins = np.empty(m, dtype=np.int64)
    total = 0.0
    for j in range(m):
        sq = ((embeddings - prototypes[j]) ** 2).sum(axis=1)
        argmins[j] = int(np.argmin(sq))
        total += float(sq[argmins[j]])
    return total / m, argmins


def loss_diversity(prototypes: np.ndarray) -> float:
    """Negated mean pairwise prototype distance over ordered pairs."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    m = prototypes.shape[0]
    if m < 2:
        raise ValueError("diversity loss needs at least 2 prototypes")
    diffs = prototypes[:, None, :] - prototypes[None, :, :]
    norms = np.sqrt((diffs ** 2).sum(axis=2))
    return float(-norms.sum() / (m * (m - 1)))


def _acc_from_trace(trace: BatchTrace, labels: np.ndarray) -> float:
    return loss_accuracy(trace.probs, labels)


def composite_loss(params: ModelParams, config: ModelConfig,
                   batch_embeddings: np.ndarray, batch_labels: np.ndarray,
                   embeddings: np.ndarray, weights: LossWeights) -> LossBreakdown:
    """Evaluate all three loss parts and their weighted total."""
    trace = forward_batch(params, config, batch_embeddings)
    acc = _acc_from_trace(trace, batch_labels)
    prox, argmins = loss_proximity(params.prototypes, embeddings)
    div = loss_diversity(params.prototypes)
    total = weights.lambda1 * acc + weights.lambda2 * prox + weights.lambda3 * div
    return LossBreakdown(acc=acc, prox=prox, div=div, total=total,
                         prox_argmins=argmins)


def grad_accuracy(params: ModelParams, config: ModelConfig,
                  batch_embeddings: np.ndarray, batch_labels: np.ndarray,
                  trace: BatchTrace | None = None) -> tuple[float, GradientSet]:
    """Loss value and exact gradient of the summed cross-entropy term."""
    S = np.asarray(batch_embeddings, dtype=np.float64)
    labels = np.asarray(batch_labels, dtype=np.int64)
    if trace is None:
        trace = forward_batch(params, config, S)
    n = S.shape[0]
    dk = config.head_dim

    grads = GradientSet.zeros_like(params)

    # Softmax + cross-entropy: dL/dlogits = probs - onehot.
    dlogits = trace.probs.copy()
    dlogits[np.arange(n), labels] -= 1.0

    grads.out_weight[:] = dlogits.T @ trace.concat
    grads.out_bias[:] = dlogits.sum(axis=0)
    dconcat = dlogits @ params.out_weight            # (n, H*dk)

    for i in range(config.num_heads):
        dR = dconcat[:, i * dk:(i + 1) * dk]          # (n, dk)
        K = trace.keys[i]                             # (M, dk)
        Q = trace.queries[i]                          # (n, dk)
        gammas = trace.gammas[i]                      # (n, M), zero outside N
        mask = trace.masks[i]                         # (n, M)
        alphas = trace.alphas[i]
        denom = trace.denoms[i]                       # (n,)

        # Mixture r = sum_j gamma_j k_j with gamma_j = alpha_j / A over the
        # frozen neighborhood. Chain rule through gamma collapses to
        # d(alpha_l) = dr . (k_l - r) / A for members, 0 otherwise.
        dRK = dR @ K.T                                # (n, M): dr . k_l
        dr_dot_r = (dR * trace.mixed[i]).sum(axis=1)  # (n,): dr . r
        dalpha = np.where(mask, (dRK - dr_dot_r[:, None]) / denom[:, None], 0.0)

        dsim = dalpha * alphas * (1.0 - alphas)       # sigmoid derivative
        dQ = dsim @ K / dk                            # (n, dk)
        dK = gammas.T @ dR + dsim.T @ Q / dk          # (M, dk): mixture + similarity paths

        grads.wq[i][:] = dQ.T @ S
        grads.wk[i][:] = dK.T @ params.prototypes
        grads.prototypes += dK @ params.wk[i]

    return _acc_from_trace(trace, labels), grads


def grad_proximity(prototypes: np.ndarray,
                   embeddings: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Proximity loss, its gradient w.r.t. the prototypes, and the argmins."""
    value, argmins = loss_proximity(prototypes, embeddings)
    m = prototypes.shape[0]
    emb = np.asarray(embeddings, dtype=np.float64)
    grad = (2.0 / m) * (np.asarray(prototypes, dtype=np.float64) - emb[argmins])
    return value, grad, argmins


def grad_diversity(prototypes: np.ndarray) -> tuple[float, np.ndarray]:
    """Diversity loss and its gradient w.r.t. the prototypes.

    d/dp_j = -(2/(M(M-1))) sum_{k != j} (p_j - p_k) / ||p_j - p_k||, with
    coincident pairs contributing zero.
    """
    p = np.asarray(prototypes, dtype=np.float64)
    m = p.shape[0]
    if m < 2:
        raise ValueError("diversity loss needs at least 2 prototypes")
    diffs = p[:, None, :] - p[None, :, :]
    norms = np.sqrt((diffs ** 2).sum(axis=2))
    value = float(-norms.sum() / (m * (m - 1)))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(norms[:, :, None] > 0.0, diffs / norms[:, :, None], 0.0)
    grad = -(2.0 / (m * (m - 1))) * unit.sum(axis=1)
    return value, grad


def backward(params: ModelParams, config: ModelConfig,
             batch_embeddings: np.ndarray, batch_labels: np.ndarray,
             embeddings: np.ndarray,
             weights: LossWeights) -> tuple[LossBreakdown, GradientSet]:
    """Loss breakdown and exact gradient of the weighted composite objective."""
    if len(np.asarray(batch_labels)) == 0:
        raise ValueError("backward needs a non-empty batch")
    acc, grads = grad_accuracy(params, config, batch_embeddings, batch_labels)
    grads.scale(weights.lambda1)
    prox, prox_grad, argmins = grad_proximity(params.prototypes, embeddings)
    div, div_grad = grad_diversity(params.prototypes)
    grads.prototypes += weights.lambda2 * prox_grad + weights.lambda3 * div_grad
    grads.check_finite()
    total = weights.lambda1 * acc + weights.lambda2 * prox + weights.lambda3 * div
    breakdown = LossBreakdown(acc=acc, prox=prox, div=div, total=total,
                              prox_argmins=argmins)
    return breakdown, grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    num_checked: int
    num_excluded: int
    num_membership_flips: int
    num_argmin_flips: int
    tensor_errors: dict[str, float]


def _loss_and_selections(params, config, batch_x, batch_y, embeddings, weights):
    trace = forward_batch(params, config, batch_x)
    acc = _acc_from_trace(trace, batch_y)
    prox, argmins = loss_proximity(params.prototypes, embeddings)
    div = loss_diversity(params.prototypes)
    total = weights.lambda1 * acc + weights.lambda2 * prox + weights.lambda3 * div
    masks = np.stack(trace.masks)
    return total, masks, argmins


def finite_diff_check(params: ModelParams, config: ModelConfig,
                      batch_embeddings: np.ndarray, batch_labels: np.ndarray,
                      embeddings: np.ndarray, weights: LossWeights,
                      epsilon: float = 5e-4, coords_per_tensor: int = 200,
                      seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    Checks up to ``coords_per_tensor`` randomly chosen coordinates per tensor
    with step +/- epsilon. The objective is only piecewise differentiable: the
    per-head neighborhoods and the proximity argmin pairs are frozen
    selections of the forward pass. Coordinates whose perturbation flips
    either selection are excluded from the comparison and counted separately.
    The default step is chosen so that cancellation noise on near-zero
    gradient coordinates stays below the relative-error floor.
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in [1e-5, 1e-2], got {epsilon}")
    rng = np.random.default_rng(seed)
    _, grads = backward(params, config, batch_embeddings, batch_labels,
                        embeddings, weights)
    _, base_masks, base_argmins = _loss_and_selections(
        params, config, batch_embeddings, batch_labels, embeddings, weights)

    max_rel = 0.0
    checked = 0
    excluded = 0
    membership_flips = 0
    argmin_flips = 0
    tensor_errors: dict[str, float] = {}
    for (name, tensor), (_, grad) in zip(params.tensors(), grads.tensors()):
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        n_pick = min(flat.size, coords_per_tensor)
        coords = rng.choice(flat.size, size=n_pick, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            up, up_masks, up_arg = _loss_and_selections(
                params, config, batch_embeddings, batch_labels, embeddings, weights)
            flat[c] = orig - epsilon
            down, down_masks, down_arg = _loss_and_selections(
                params, config, batch_embeddings, batch_labels, embeddings, weights)
            flat[c] = orig
            mask_ok = (np.array_equal(up_masks, base_masks)
                       and np.array_equal(down_masks, base_masks))
            argmin_ok = (np.array_equal(up_arg, base_argmins)
                         and np.array_equal(down_arg, base_argmins))
            if not mask_ok:
                membership_flips += 1
            if not argmin_ok:
                argmin_flips += 1
            if not (mask_ok and argmin_ok):
                excluded += 1
                continue
            numeric = (up - down) / (2.0 * epsilon)
            analytic = gflat[c]
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
            checked += 1
        tensor_errors[name] = worst
        max_rel = max(max_rel, worst)
    return GradCheckResult(max_rel_error=max_rel, num_checked=checked,
                           num_excluded=excluded,
                           num_membership_flips=membership_flips,
                           num_argmin_flips=argmin_flips,
                           tensor_errors=tensor_errors)


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState,
              train_config: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place."""
    b1, b2 = train_config.adam_beta1, train_config.adam_beta2
    eps, lr = train_config.adam_eps, train_config.learning_rate
    state.t += 1
    t = state.t
    for (_, p), (_, g), (_, m), (_, v) in zip(params.tensors(), grads.tensors(),
                                              state.m.tensors(), state.v.tensors()):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def _round_update(params, config, round_x, round_y, prox_ref, weights):
    """Gradient and loss parts for one accumulation round.

    round_x/round_y are lists of micro-batch arrays. Cross-entropy gradients
    are summed over micro-batches and divided by the round's sample count;
    proximity/diversity enter once per round.
    """
    total_samples = sum(len(y) for y in round_y)
    acc_sum = 0.0
    grads = None
    for bx, by in zip(round_x, round_y):
        acc, g = grad_accuracy(params, config, bx, by)
        acc_sum += acc
        if grads is None:
            grads = g
        else:
            grads.add_scaled(g, 1.0)
    grads.scale(weights.lambda1 / total_samples)
    prox, prox_grad, _ = grad_proximity(params.prototypes, prox_ref)
    div, div_grad = grad_diversity(params.prototypes)
    grads.prototypes += weights.lambda2 * prox_grad + weights.lambda3 * div_grad
    return grads, acc_sum, total_samples, prox, div


def train(train_set: EmbeddingDataset, val_set: EmbeddingDataset,
          model_config: ModelConfig, train_config: TrainConfig,
          initial_params: ModelParams | None = None,
          ) -> tuple[ModelParams, list[dict]]:
    """Train the head on frozen embeddings; returns final params and history.

    One history record per epoch: epoch index, per-sample mean accuracy loss,
    proximity/diversity values (averaged over the epoch's update rounds), the
    weighted total, and validation accuracy. Deterministic given the seeds in
    both configs. Raises NumericalError on a non-finite loss, naming the last
    epoch that completed cleanly.
    """
    if train_set.dim != model_config.dim:
        raise ValueError(f"train set dim {train_set.dim} != model dim {model_config.dim}")
    if val_set.dim != model_config.dim:
        raise ValueError(f"val set dim {val_set.dim} != model dim {model_config.dim}")
    if train_set.num_classes != model_config.num_classes:
        raise ValueError(f"train set has {train_set.num_classes} classes, "
                         f"model expects {model_config.num_classes}")

    if initial_params is None:
        params = init_params(model_config, train_set.embeddings)
    else:
        initial_params.check_shapes(model_config)
        params = initial_params.copy()
    state = AdamState.fresh(params)
    weights = train_config.loss_weights

    X = train_set.embeddings.astype(np.float64)
    y = train_set.labels
    Xval = val_set.embeddings.astype(np.float64)
    n = train_set.count
    rng = np.random.default_rng(train_config.seed)
    micro = train_config.batch_size
    per_round = micro * train_config.accum_steps

    history: list[dict] = []
    for epoch in range(train_config.epochs):
        perm = rng.permutation(n)
        acc_sum_epoch = 0.0
        prox_vals, div_vals = [], []
        for start in range(0, n, per_round):
            round_idx = perm[start:start + per_round]
            round_x = [X[round_idx[i:i + micro]]
                       for i in range(0, len(round_idx), micro)]
            round_y = [y[round_idx[i:i + micro]]
                       for i in range(0, len(round_idx), micro)]
            prox_ref = X if train_config.prox_over_full_set else X[round_idx]
            grads, acc_sum, _, prox, div = _round_update(
                params, model_config, round_x, round_y, prox_ref, weights)
            if not (np.isfinite(acc_sum) and np.isfinite(prox) and np.isfinite(div)):
                raise NumericalError(
                    f"non-finite loss during epoch {epoch}; "
                    f"last clean epoch: {epoch - 1 if epoch else 'none'}")
            grads.check_finite()
            adam_step(params, grads, state, train_config)
            acc_sum_epoch += acc_sum
            prox_vals.append(prox)
            div_vals.append(div)

        loss_acc = acc_sum_epoch / n
        loss_prox = float(np.mean(prox_vals))
        loss_div = float(np.mean(div_vals))
        val_pred = predict_batch(params, model_config, Xval)
        history.append({
            "epoch": epoch,
            "loss_total": weights.lambda1 * loss_acc + weights.lambda2 * loss_prox
                          + weights.lambda3 * loss_div,
            "loss_acc": loss_acc,
            "loss_prox": loss_prox,
            "loss_div": loss_div,
            "val_accuracy": float((val_pred == val_set.labels).mean()),
        })
    return params, history
