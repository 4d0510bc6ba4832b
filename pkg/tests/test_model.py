import pytest
import torch
import torch.nn.functional as F

from mbj.model import build_model, forward, load_checkpoint, read_prototypes, save_checkpoint


def mlp(normalize=False, seed=0):
    torch.manual_seed(seed)
    return build_model("mlp", 7, embed_dim=12, in_dim=5, hidden_dim=16, normalize=normalize)


def test_output_shapes():
    emb, logits = forward(mlp(), torch.randn(9, 5))
    assert emb.shape == (9, 12) and logits.shape == (9, 7)


def test_resnet_shapes():
    torch.manual_seed(0)
    model = build_model("resnet8", 3, embed_dim=16).eval()
    emb, logits = model(torch.randn(2, 3, 32, 32))
    assert emb.shape == (2, 16) and logits.shape == (2, 3)


def test_wrong_input_width_is_rejected():
    with pytest.raises(ValueError):
        mlp()(torch.randn(2, 6))
    with pytest.raises(ValueError):
        mlp()(torch.randn(0, 5))
    with pytest.raises(ValueError):
        build_model("vgg", 3, in_dim=4)


def test_same_seed_same_outputs():
    x = torch.randn(4, 5)
    a, b = mlp(seed=3).eval(), mlp(seed=3).eval()
    assert torch.equal(a(x)[1], b(x)[1])


def test_logits_recompute_from_embeddings_and_head():
    model = mlp().eval()
    emb, logits = model(torch.randn(6, 5))
    assert torch.allclose(logits, emb @ read_prototypes(model).t(), atol=1e-5)
    cos = mlp(normalize=True).eval()
    emb, logits = cos(torch.randn(6, 5))
    expected = F.normalize(emb, dim=1) @ F.normalize(read_prototypes(cos), dim=1).t()
    assert torch.allclose(logits, expected, atol=1e-5)


def test_prototypes_are_a_detached_copy():
    model = mlp()
    protos = read_prototypes(model)
    assert not protos.requires_grad
    protos.zero_()
    assert torch.count_nonzero(model.weight) > 0


def test_prototypes_move_after_a_step():
    model = mlp()
    before = read_prototypes(model)
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    emb, logits = model(torch.randn(8, 5))
    F.cross_entropy(logits, torch.randint(0, 7, (8,))).backward()
    opt.step()
    assert not torch.equal(before, read_prototypes(model))


def test_checkpoint_roundtrip(tmp_path):
    model = mlp(normalize=True).eval()
    save_checkpoint(model, tmp_path / "m.pt")
    again = load_checkpoint(tmp_path / "m.pt").eval()
    x = torch.randn(3, 5)
    assert torch.equal(model(x)[1], again(x)[1])
    assert again.normalize and again.header() == model.header()
