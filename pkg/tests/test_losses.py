import math

import numpy as np
import pytest
import torch

from damal import losses
from oracles import central_difference, relative_error


def probs_of(*rows):
    """Single-batch probabilities from per-voxel class vectors: shape (1, C, V)."""
    return torch.tensor(rows, dtype=torch.float64).T.unsqueeze(0)


def rand_instance(seed, classes=4, side=4, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, classes, side, side, side, generator=g, dtype=dtype)
    target = torch.randint(0, classes, (1, side, side, side), generator=g)
    weights = torch.rand(1, classes, side, side, side, generator=g, dtype=dtype)
    return logits, target, weights


def test_ce_examples():
    t = torch.tensor([[0, 1]])
    perfect = probs_of([1, 0], [0, 1])
    assert losses.cross_entropy(perfect, t) < 1e-6
    half = probs_of([0.5, 0.5])
    assert abs(losses.cross_entropy(half, torch.tensor([[1]])) - math.log(2)) < 1e-12
    uni = torch.full((1, 4, 3), 0.25, dtype=torch.float64)
    assert abs(losses.cross_entropy(uni, torch.tensor([[0, 2, 3]])) - math.log(4)) < 1e-12


def test_shape_mismatch_errors():
    p = torch.full((1, 2, 3), 0.5)
    with pytest.raises(ValueError):
        losses.cross_entropy(p, torch.zeros((1, 4), dtype=torch.long))
    with pytest.raises(ValueError):
        losses.attention_loss(p, torch.zeros((1, 3), dtype=torch.long), torch.ones(1, 2, 4))
    with pytest.raises(ValueError):
        losses.attention_loss(p, torch.zeros((1, 3), dtype=torch.long), -torch.ones(1, 2, 3))


def test_dice_examples():
    t = torch.tensor([[0, 1, 1]])
    assert losses.dice_loss(probs_of([1, 0], [0, 1], [0, 1]), t) == 0
    assert losses.dice_loss(probs_of([0, 1], [1, 0], [1, 0]), t) == 1
    # |T| = 4 voxels of class 1; P puts class-1 mass 1 on two of them
    t = torch.tensor([[1, 1, 1, 1, 0, 0]])
    p = probs_of([0, 1], [0, 1], [1, 0], [1, 0], [1, 0], [1, 0])
    assert abs(losses.dice_loss(p, t) - 1 / 3) < 1e-12


def test_focal_examples():
    half = probs_of([0.5, 0.5])
    t = torch.tensor([[1]])
    assert abs(losses.focal_loss(half, t, gamma=2) - 0.25 * math.log(2)) < 1e-12
    near = probs_of([0.01, 0.99])
    ratio = losses.focal_loss(near, t, 2) / losses.cross_entropy(near, t)
    assert abs(ratio - 0.01 ** 2) < 1e-12


def test_focal_alpha():
    p = probs_of([0.3, 0.7], [0.6, 0.4])
    t = torch.tensor([[1, 0]])
    plain = (-(0.3 ** 2) * math.log(0.7) - (0.4 ** 2) * math.log(0.6)) / 2
    weighted = (-2 * (0.3 ** 2) * math.log(0.7) - 0.5 * (0.4 ** 2) * math.log(0.6)) / 2
    assert abs(losses.focal_loss(p, t, 2) - plain) < 1e-12
    assert abs(losses.focal_loss(p, t, 2, alpha=[0.5, 2.0]) - weighted) < 1e-12


def test_attention_examples():
    t = torch.tensor([[1]])
    p = probs_of([0.4, 0.6])
    w = torch.ones_like(p)
    assert abs(losses.attention_loss(p, t, w, reduction="sum") - 0.32) < 1e-12
    assert abs(losses.attention_loss(p, t, w) - 0.32 / 2) < 1e-12
    onehot = probs_of([0, 1], [1, 0])
    assert losses.attention_loss(onehot, torch.tensor([[1, 0]]), torch.ones_like(onehot)) == 0


def test_attention_derivative_true_class():
    for pv in np.linspace(0.1, 0.9, 9):
        for w in (1.0, 0.37):
            p = probs_of([1 - pv, pv]).requires_grad_(True)
            loss = losses.attention_loss(p, torch.tensor([[1]]), torch.full_like(p, w), reduction="sum")
            loss.backward()
            assert abs(p.grad[0, 1, 0].item() - (-2 * w * (1 - pv))) < 1e-12


def test_combined_terms():
    logits, t, w = rand_instance(7)
    p = torch.softmax(logits, 1)
    lv = losses.combined_loss(p, t, w, lambda_dice=0.7)
    assert abs(lv.total.item() - (losses.attention_loss(p, t, w).item()
                                  + 0.7 * losses.dice_loss(p, t).item())) < 1e-9
    assert losses.combined_loss(p, t, w, 0).total.item() == losses.attention_loss(p, t, w).item()
    perfect = losses.one_hot(t, 4, torch.float64)
    assert losses.combined_loss(perfect, t, w).total.item() == 0


def test_attention_weight_locality():
    logits, t, w = rand_instance(11)
    w = w.clone()
    w[:, :, :2] = 0
    p1 = torch.softmax(logits, 1)
    bumped = logits.clone()
    bumped[:, :, :2] += torch.randn_like(bumped[:, :, :2])
    p2 = torch.softmax(bumped, 1)
    assert abs(losses.attention_loss(p1, t, w).item() - losses.attention_loss(p2, t, w).item()) < 1e-15


def test_permutation_equivariance():
    logits, t, w = rand_instance(5)
    perm = torch.randperm(64, generator=torch.Generator().manual_seed(0))
    flat = lambda x: x.reshape(*x.shape[:-3], 64)[..., perm]
    p = torch.softmax(logits, 1)
    for fn in (losses.cross_entropy, losses.dice_loss, lambda a, b: losses.focal_loss(a, b, 2)):
        assert abs(fn(p, t).item() - fn(flat(p), flat(t)).item()) < 1e-12
    assert abs(losses.attention_loss(p, t, w).item()
               - losses.attention_loss(flat(p), flat(t), flat(w)).item()) < 1e-12


@pytest.mark.parametrize("name", ["ce", "focal", "dice", "attention", "combined"])
def test_finite_difference_few_seeds(name):
    for seed in range(3):
        logits, t, w = rand_instance(seed)
        fn = {
            "ce": lambda z: losses.cross_entropy(torch.softmax(z, 1), t),
            "focal": lambda z: losses.focal_loss(torch.softmax(z, 1), t, 2.0),
            "dice": lambda z: losses.dice_loss(torch.softmax(z, 1), t),
            "attention": lambda z: losses.attention_loss(torch.softmax(z, 1), t, w),
            "combined": lambda z: losses.combined_loss(torch.softmax(z, 1), t, w).total,
        }[name]
        z = logits.clone().requires_grad_(True)
        fn(z).backward()
        assert relative_error(central_difference(fn, logits), z.grad) < 1e-4


def test_gradient_crossover_values():
    assert 0.29 <= losses.gradient_crossover(2) <= 0.31
    assert abs(losses.gradient_crossover(2) - 0.298) < 1e-3
    assert abs(losses.gradient_crossover(1) - 1 / math.e) < 1e-9
    assert losses.gradient_crossover(0) is None


def test_crossover_separates_regimes():
    c = losses.gradient_crossover(2)
    grid = np.linspace(1e-4, c, 1000, endpoint=False)
    assert np.all(np.abs(losses.grad_focal(grid, 2)) > np.abs(losses.grad_ce(grid)))
    above = np.linspace(c + 1e-6, 1 - 1e-6, 1000)
    assert np.all(np.abs(losses.grad_focal(above, 2)) < np.abs(losses.grad_ce(above)))


def test_closed_form_gradients_match_autograd():
    for pv in (0.05, 0.3, 0.7):
        p = torch.tensor(pv, dtype=torch.float64, requires_grad=True)
        (-(1 - p) ** 2 * torch.log(p)).backward()
        assert abs(p.grad.item() - losses.grad_focal(pv, 2)) < 1e-12


def test_gradient_table_shape():
    rows = losses.gradient_table([1, 2], points=9)
    assert len(rows) == 18
    assert all(0 < r[1] < 1 for r in rows)
