import numpy as np
import pytest
import torch

from opensetlt.errors import DimensionError
from opensetlt.etf import make_simplex_etf
from opensetlt.model import (
    ClassCenters,
    ResNetEncoder,
    apply_etf_head,
    build_model,
    feature_centers,
    multi_binary_scores,
)


def test_centers_single_class():
    c = feature_centers(torch.tensor([[1.0, 1.0], [3.0, 3.0]]), torch.tensor([0, 0]), 2)
    np.testing.assert_allclose(c.centers[0].numpy(), [2.0, 2.0])
    assert c.present_mask.tolist() == [True, False]
    assert c.present_labels.tolist() == [0]


def test_centers_hand_mean():
    c = feature_centers(torch.tensor([[0.0, 2.0], [4.0, 2.0], [1.0, 1.0]]), torch.tensor([0, 0, 1]), 2)
    np.testing.assert_allclose(c.centers.numpy(), [[2.0, 2.0], [1.0, 1.0]])


def test_centers_singletons_equal_samples():
    x = torch.randn(4, 3)
    c = feature_centers(x, torch.tensor([2, 0, 3, 1]), 4)
    np.testing.assert_allclose(c.centers.numpy(), x[[1, 3, 0, 2]].numpy())


def test_centers_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(10, 5, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (10,), generator=g)
    perm = torch.randperm(10, generator=g)
    a, b = feature_centers(x, y, 3), feature_centers(x[perm], y[perm], 3)
    np.testing.assert_allclose(a.centers.numpy(), b.centers.numpy(), atol=1e-12)


def test_pair_scores():
    head = torch.nn.Linear(1, 4, bias=True)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.copy_(torch.tensor([0.0, 0.0, 2.0, 0.0]))
    pairs = multi_binary_scores(head, torch.zeros(3, 1), 2)
    np.testing.assert_allclose(pairs[0, 0].detach().numpy(), [0.5, 0.5])
    np.testing.assert_allclose(pairs[0, 1].detach().numpy(), [0.8808, 0.1192], atol=1e-4)
    np.testing.assert_allclose(pairs.sum(-1).detach().numpy(), 1.0, atol=1e-6)


def test_pair_scores_no_batch_coupling():
    model = build_model("mlp", (6,), 3, feature_dim=8, embed_dim=16)
    model.eval()
    x = torch.randn(5, 6)
    with torch.no_grad():
        full = model(x)["pairs"]
        single = model(x[2:3])["pairs"]
    np.testing.assert_allclose(full[2].numpy(), single[0].numpy(), atol=1e-6)


def test_etf_head_column_gives_gram_row():
    frame = make_simplex_etf(8, 4, seed=3)
    N = torch.tensor(np.array(frame.vectors))
    centers = ClassCenters(N.T.clone(), torch.ones(4, dtype=torch.bool))
    logits, labels = apply_etf_head(centers, frame)
    expected = np.full((4, 4), -1 / 3)
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(logits.numpy(), expected, atol=1e-9)
    assert labels.tolist() == [0, 1, 2, 3]


def test_etf_head_zero_and_duplicate_centers():
    frame = make_simplex_etf(8, 3, seed=1)
    zero = ClassCenters(torch.zeros(3, 8, dtype=torch.float64), torch.tensor([True, False, True]))
    logits, labels = apply_etf_head(zero, frame)
    assert logits.shape == (2, 3) and float(logits.abs().max()) == 0.0
    assert labels.tolist() == [0, 2]
    row = torch.randn(1, 8, dtype=torch.float64)
    dup = ClassCenters(row.repeat(3, 1), torch.ones(3, dtype=torch.bool))
    logits, _ = apply_etf_head(dup, frame)
    np.testing.assert_array_equal(logits[0].numpy(), logits[1].numpy())


def test_etf_head_dimension_check():
    with pytest.raises(DimensionError):
        apply_etf_head(ClassCenters(torch.zeros(3, 5), torch.ones(3, dtype=torch.bool)), make_simplex_etf(8, 3))


def test_forward_shapes_and_empty_batch():
    model = build_model("mlp", (6,), 4, feature_dim=16, embed_dim=32)
    out = model(torch.randn(7, 6))
    assert out["features"].shape == (7, 16)
    assert out["closed"].shape == (7, 4)
    assert out["open"].shape == (7, 5)
    assert out["pairs"].shape == (7, 4, 2)
    with pytest.raises(ValueError):
        model(torch.zeros(0, 6))


def test_eval_mode_is_deterministic():
    model = build_model("conv28", (28, 28), 3, feature_dim=16)
    model.eval()
    x = torch.rand(4, 1, 28, 28)
    with torch.no_grad():
        np.testing.assert_array_equal(model(x)["closed"].numpy(), model(x)["closed"].numpy())


def test_resnet_feature_width():
    enc = ResNetEncoder(3)
    enc.eval()
    with torch.no_grad():
        assert enc(torch.rand(2, 3, 32, 32)).shape == (2, 512)


def test_etf_is_not_a_parameter():
    model = build_model("mlp", (6,), 3, feature_dim=8)
    assert all(p is not model.etf for p in model.parameters())
    assert "etf" in dict(model.named_buffers())
