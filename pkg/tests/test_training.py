"""Losses, hand-derived gradients, the finite-difference checker, Adam, train."""

import math

import numpy as np
import pytest

from protohead.dataio import EmbeddingDataset, SyntheticSpec, gen_synthetic
from protohead.errors import NumericalError
from protohead.model import ModelConfig, ModelParams, init_params
from protohead.training import (AdamState, GradientSet, LossWeights,
                                TrainConfig, adam_step, backward,
                                composite_loss, finite_diff_check,
                                grad_diversity, grad_proximity, loss_accuracy,
                                loss_diversity, loss_proximity, train)

from factories import small_setup


# ---------------------------------------------------------------- loss values

def test_accuracy_loss_matches_hand_computation():
    probs = np.array([[0.25, 0.75], [0.5, 0.5]])
    labels = np.array([1, 0])
    expected = -(math.log(0.75) + math.log(0.5))
    assert loss_accuracy(probs, labels) == pytest.approx(expected, rel=1e-12)


def test_accuracy_loss_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        loss_accuracy(np.array([[0.7, 0.7]]), np.array([0]))


def test_accuracy_loss_survives_zero_probability():
    # exactly 0 gets floored instead of producing -inf
    val = loss_accuracy(np.array([[1.0, 0.0]]), np.array([1]))
    assert np.isfinite(val)
    assert val == pytest.approx(-math.log(1e-12))


def test_proximity_loss_matches_hand_computation():
    prototypes = np.array([[0.0, 0.0], [3.0, 4.0]])
    embeddings = np.array([[0.0, 1.0], [6.0, 8.0]])
    # nearest to [0,0] is [0,1] at squared distance 1
    # nearest to [3,4] is [0,1] at 9+9=18 (vs 9+16=25)
    value, argmins = loss_proximity(prototypes, embeddings)
    assert value == pytest.approx((1.0 + 18.0) / 2.0)
    assert argmins.tolist() == [0, 0]


def test_proximity_loss_is_zero_on_exact_matches():
    emb = np.array([[1.0, 2.0], [-3.0, 0.5]])
    value, argmins = loss_proximity(emb.copy(), emb)
    assert value == 0.0
    assert argmins.tolist() == [0, 1]


def test_proximity_ties_resolve_to_lowest_index():
    prototypes = np.array([[0.0, 0.0]])
    embeddings = np.array([[1.0, 0.0], [-1.0, 0.0]])  # equidistant
    _, argmins = loss_proximity(prototypes, embeddings)
    assert argmins.tolist() == [0]


def test_diversity_loss_matches_hand_computation():
    two = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert loss_diversity(two) == pytest.approx(-5.0)
    three = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    expected = -(2 * (1.0 + 1.0 + math.sqrt(2.0))) / 6.0
    assert loss_diversity(three) == pytest.approx(expected, rel=1e-12)


def test_loss_signs_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        protos = rng.normal(size=(4, 3))
        emb = rng.normal(size=(9, 3))
        assert loss_proximity(protos, emb)[0] >= 0.0
        assert loss_diversity(protos) <= 0.0


def test_diversity_needs_two_prototypes():
    with pytest.raises(ValueError):
        loss_diversity(np.array([[1.0, 2.0]]))


def test_composite_combines_parts_with_weights(tiny):
    config, params, embeddings, labels = tiny
    weights = LossWeights(2.0, 0.3, 0.7)
    br = composite_loss(params, config, embeddings, labels, embeddings, weights)
    assert br.total == pytest.approx(2.0 * br.acc + 0.3 * br.prox + 0.7 * br.div)
    assert br.acc >= 0.0 and br.prox >= 0.0 and br.div <= 0.0


# ---------------------------------------------------------------- gradients

def test_proximity_gradient_closed_form():
    prototypes = np.array([[0.0, 0.0], [3.0, 4.0]])
    embeddings = np.array([[0.0, 1.0], [6.0, 8.0]])
    _, grad, argmins = grad_proximity(prototypes, embeddings)
    expected = (2.0 / 2) * (prototypes - embeddings[argmins])
    assert np.allclose(grad, expected, atol=1e-15)


def test_diversity_gradient_matches_pairwise_formula():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(5, 3))
    _, grad = grad_diversity(p)
    m = p.shape[0]
    expected = np.zeros_like(p)
    for j in range(m):
        for k in range(m):
            if k == j:
                continue
            diff = p[j] - p[k]
            expected[j] -= (2.0 / (m * (m - 1))) * diff / np.linalg.norm(diff)
    assert np.allclose(grad, expected, atol=1e-12)


def test_diversity_gradient_ignores_coincident_pairs():
    p = np.array([[1.0, 1.0], [1.0, 1.0], [4.0, 5.0]])
    value, grad = grad_diversity(p)
    assert np.all(np.isfinite(grad))
    # the coincident pair contributes nothing; rows 0 and 1 see only row 2
    assert np.allclose(grad[0], grad[1])


def test_gradients_flow_only_to_prototypes_without_accuracy_term(tiny):
    config, params, embeddings, labels = tiny
    weights = LossWeights(0.0, 0.5, 0.0)
    _, grads = backward(params, config, embeddings, labels, embeddings, weights)
    for name, g in grads.tensors():
        if name == "prototypes":
            assert np.any(g != 0.0)
        else:
            assert np.all(g == 0.0)
    _, expected, _ = grad_proximity(params.prototypes, embeddings)
    assert np.allclose(grads.prototypes, 0.5 * expected, atol=1e-15)


def test_zero_weights_give_zero_gradients_and_zero_differences(tiny):
    config, params, embeddings, labels = tiny
    weights = LossWeights(0.0, 0.0, 0.0)
    _, grads = backward(params, config, embeddings, labels, embeddings, weights)
    for _, g in grads.tensors():
        assert np.all(g == 0.0)
    result = finite_diff_check(params, config, embeddings, labels,
                               embeddings, weights, seed=0)
    assert result.max_rel_error == 0.0


def test_finite_differences_confirm_composite_gradient():
    config, params, embeddings, labels = small_setup(seed=7)
    result = finite_diff_check(params, config, embeddings, labels,
                               embeddings, LossWeights(), seed=7)
    assert result.max_rel_error < 1e-4
    assert result.num_checked > 0
    assert set(result.tensor_errors) == {n for n, _ in params.tensors()}


def test_finite_differences_confirm_accuracy_term_alone():
    config, params, embeddings, labels = small_setup(seed=3)
    result = finite_diff_check(params, config, embeddings, labels,
                               embeddings, LossWeights(1.0, 0.0, 0.0), seed=3)
    assert result.max_rel_error < 1e-4


def test_no_membership_exclusions_when_threshold_is_extreme():
    config, params, embeddings, labels = small_setup(seed=1)
    far = ModelConfig(dim=config.dim, num_prototypes=config.num_prototypes,
                      num_heads=config.num_heads, head_dim=config.head_dim,
                      num_classes=config.num_classes, threshold=0.999,
                      seed=config.seed, prototype_init=config.prototype_init)
    result = finite_diff_check(params, far, embeddings, labels,
                               embeddings, LossWeights(), seed=1)
    assert result.num_membership_flips == 0
    assert result.num_excluded == 0


def test_finite_diff_check_validates_epsilon(tiny):
    config, params, embeddings, labels = tiny
    for eps in (1e-6, 0.5):
        with pytest.raises(ValueError):
            finite_diff_check(params, config, embeddings, labels,
                              embeddings, LossWeights(), epsilon=eps)


# ---------------------------------------------------------------- Adam

def _scalarish_params():
    cfg = ModelConfig(dim=1, num_prototypes=1, num_heads=1, head_dim=1,
                      num_classes=2, prototype_init="gaussian")
    params = init_params(cfg)
    return cfg, params


def test_adam_first_step_size():
    cfg, params = _scalarish_params()
    before = params.prototypes.copy()
    grads = GradientSet.zeros_like(params)
    grads.prototypes[:] = 1.0
    state = AdamState.fresh(params)
    adam_step(params, grads, state, TrainConfig(epochs=1))
    moved = before - params.prototypes
    assert moved[0, 0] == pytest.approx(1e-4 / (1.0 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_is_a_no_op_but_counts():
    cfg, params = _scalarish_params()
    before = [t.copy() for _, t in params.tensors()]
    state = AdamState.fresh(params)
    adam_step(params, GradientSet.zeros_like(params), state, TrainConfig(epochs=1))
    assert state.t == 1
    for (_, now), was in zip(params.tensors(), before):
        assert np.array_equal(now, was)


def test_adam_is_bit_deterministic(tiny):
    config, params, embeddings, labels = tiny
    runs = []
    for _ in range(2):
        p = params.copy()
        state = AdamState.fresh(p)
        for step in range(5):
            _, grads = backward(p, config, embeddings, labels, embeddings,
                                LossWeights())
            adam_step(p, grads, state, TrainConfig(epochs=1))
        runs.append(p)
    for (_, a), (_, b) in zip(runs[0].tensors(), runs[1].tensors()):
        assert np.array_equal(a, b)


def test_gradient_descent_on_proximity_contracts_distance():
    p = np.array([[2.0, 3.0]])
    s = np.array([[0.0, 0.0]])
    lr = 0.05
    dist = np.linalg.norm(p - s)
    for _ in range(50):
        _, grad, _ = grad_proximity(p, s)
        p = p - lr * grad
        new_dist = np.linalg.norm(p - s)
        assert new_dist <= dist + 1e-15
        dist = new_dist
    assert dist < 0.02


# ---------------------------------------------------------------- training

def _toy_sets(seed=0, n_per=12, d=6):
    spec = SyntheticSpec(num_clusters=2, per_cluster=n_per, dim=d,
                         center_spread=3.0, noise_sigma=0.5, seed=seed)
    ds = gen_synthetic(spec)
    return ds


def test_batch_equals_accumulated_singletons():
    ds = _toy_sets(seed=3, n_per=4, d=5)   # 8 samples
    cfg = ModelConfig(dim=5, num_prototypes=4, num_heads=2, head_dim=3,
                      num_classes=2, seed=3)
    one_batch = TrainConfig(epochs=4, batch_size=8, accum_steps=1, seed=3)
    singles = TrainConfig(epochs=4, batch_size=1, accum_steps=8, seed=3)
    pa, _ = train(ds, ds, cfg, one_batch)
    pb, _ = train(ds, ds, cfg, singles)
    for (_, a), (_, b) in zip(pa.tensors(), pb.tensors()):
        assert np.max(np.abs(a - b)) < 1e-10


def test_training_is_deterministic():
    ds = _toy_sets(seed=5)
    cfg = ModelConfig(dim=6, num_prototypes=4, num_heads=2, head_dim=3,
                      num_classes=2, seed=5)
    tc = TrainConfig(epochs=3, seed=5)
    pa, ha = train(ds, ds, cfg, tc)
    pb, hb = train(ds, ds, cfg, tc)
    for (_, a), (_, b) in zip(pa.tensors(), pb.tensors()):
        assert np.array_equal(a, b)
    assert ha == hb


def test_history_records_every_epoch():
    ds = _toy_sets(seed=1)
    cfg = ModelConfig(dim=6, num_prototypes=4, num_heads=2, head_dim=3,
                      num_classes=2, seed=1)
    _, history = train(ds, ds, cfg, TrainConfig(epochs=5, seed=1))
    assert len(history) == 5
    for i, rec in enumerate(history):
        assert rec["epoch"] == i
        for key in ("loss_total", "loss_acc", "loss_prox", "loss_div",
                    "val_accuracy"):
            assert key in rec
        assert 0.0 <= rec["val_accuracy"] <= 1.0
        assert rec["loss_prox"] >= 0.0
        assert rec["loss_div"] <= 0.0


def test_training_reduces_the_objective():
    ds = _toy_sets(seed=2, n_per=20, d=8)
    cfg = ModelConfig(dim=8, num_prototypes=6, num_heads=2, head_dim=4,
                      num_classes=2, seed=2)
    _, history = train(ds, ds, cfg, TrainConfig(epochs=40, batch_size=4,
                                                accum_steps=2, seed=2))
    assert history[-1]["loss_total"] < history[0]["loss_total"]


def test_large_diversity_weight_spreads_prototypes():
    ds = _toy_sets(seed=6, n_per=15, d=6)
    cfg = ModelConfig(dim=6, num_prototypes=5, num_heads=2, head_dim=3,
                      num_classes=2, seed=6)
    start = init_params(cfg, train_embeddings=ds.embeddings)
    tc = TrainConfig(epochs=30, batch_size=4, accum_steps=2, seed=6,
                     loss_weights=LossWeights(1.0, 0.1, 10.0))
    final, _ = train(ds, ds, cfg, tc, initial_params=start.copy())

    def mean_pairwise(p):
        diffs = p[:, None, :] - p[None, :, :]
        norms = np.sqrt((diffs ** 2).sum(axis=2))
        m = p.shape[0]
        return norms.sum() / (m * (m - 1))

    assert mean_pairwise(final.prototypes) > mean_pairwise(start.prototypes)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_named_epoch():
    ds = _toy_sets(seed=4)
    cfg = ModelConfig(dim=6, num_prototypes=4, num_heads=2, head_dim=3,
                      num_classes=2, seed=4)
    reckless = TrainConfig(epochs=5, batch_size=4, accum_steps=1,
                           learning_rate=1e155, seed=4)
    with pytest.raises(NumericalError, match="non-finite loss"):
        train(ds, ds, cfg, reckless)


def test_train_validates_dataset_against_model():
    ds = _toy_sets(seed=0)
    wrong_dim = ModelConfig(dim=7, num_prototypes=4, num_heads=2, head_dim=3,
                            num_classes=2)
    with pytest.raises(ValueError, match="dim"):
        train(ds, ds, wrong_dim, TrainConfig(epochs=1))
    wrong_classes = ModelConfig(dim=6, num_prototypes=4, num_heads=2,
                                head_dim=3, num_classes=4)
    with pytest.raises(ValueError, match="class"):
        train(ds, ds, wrong_classes, TrainConfig(epochs=1))


def test_training_resumes_from_given_parameters():
    ds = _toy_sets(seed=8)
    cfg = ModelConfig(dim=6, num_prototypes=4, num_heads=2, head_dim=3,
                      num_classes=2, seed=8)
    first, _ = train(ds, ds, cfg, TrainConfig(epochs=2, seed=8))
    resumed, _ = train(ds, ds, cfg, TrainConfig(epochs=2, seed=9),
                       initial_params=first)
    assert not any(np.array_equal(a, b) for (_, a), (_, b)
                   in zip(first.tensors(), resumed.tensors()))
    # shape mismatch is rejected up front
    other = ModelConfig(dim=6, num_prototypes=5, num_heads=2, head_dim=3,
                        num_classes=2)
    with pytest.raises(ValueError):
        train(ds, ds, other, TrainConfig(epochs=1), initial_params=first)


def test_loss_weights_validation():
    LossWeights(0.0, 0.0, 0.0)          # allowed: constant objective
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.5, 0.5)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, accum_steps=0)
