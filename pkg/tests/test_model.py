import numpy as np
import pytest
import torch

from matr.geometry import ConfigError, refine_boxes
from matr.model import (
    EncoderMemory,
    MATRModel,
    ModelConfig,
    QuerySet,
    load_checkpoint,
    save_checkpoint,
)
from oracles import central_difference


@pytest.fixture(scope="module")
def model():
    return MATRModel(ModelConfig(seed=3))


def _image(seed=0, h=64, w=64):
    return np.random.default_rng(seed).random((h, w, 3)).astype(np.float32)


def _tracks(model, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(n, model.config.dim, generator=g)
    anchors = torch.rand(n, 4, generator=g) * 0.3 + 0.2
    return QuerySet.from_tracks(feats, anchors, range(1, n + 1))


def test_encode_shapes_and_determinism(model):
    img = _image()
    a, b = model.encode(img), model.encode(img.copy())
    assert a.tokens.shape == (64, 64) and len(a) == 64
    assert torch.equal(a.tokens, b.tokens)
    poked = img.copy()
    poked[10, 20, 1] += 0.5
    assert not torch.equal(model.encode(poked).tokens, a.tokens)
    with pytest.raises(ConfigError):
        model.encode(_image(h=32))


def test_init_queries(model):
    q = model.init_queries()
    assert len(q) == 20 and q.num_tracks == 0
    assert bool(((q.anchors > 0) & (q.anchors < 1)).all())
    other = MATRModel(ModelConfig(seed=3)).init_queries()
    assert torch.equal(q.features, other.features) and torch.equal(q.anchors, other.anchors)
    assert not torch.equal(MATRModel(ModelConfig(seed=4)).init_queries().features, q.features)


def test_queryset_invariants():
    with pytest.raises(ValueError):
        QuerySet(torch.zeros(1, 8), torch.zeros(1, 4), [None], ["track"])
    with pytest.raises(ValueError):
        QuerySet(torch.zeros(2, 8), torch.zeros(1, 4), [None, None], ["detect", "detect"])


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=60).validate()
    with pytest.raises(ConfigError):
        ModelConfig(dim=64, heads=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(num_queries=0).validate()


def test_mat_update_identity_at_init(model):
    memory = model.encode(_image())
    tracks = _tracks(model, 3)
    updated, boxes = model.mat_update(tracks, memory)
    assert torch.equal(updated.features, tracks.features)
    assert updated.identities == tracks.identities and updated.kinds == tracks.kinds
    assert torch.equal(updated.anchors, boxes)
    np.testing.assert_allclose(boxes.detach().numpy(), tracks.anchors.numpy(), atol=1e-6)

    empty = QuerySet.empty(model.config.dim)
    out, b = model.mat_update(empty, memory)
    assert len(out) == 0 and b.shape == (0, 4)


def test_mat_box_gradient_reaches_memory_after_one_step():
    torch.manual_seed(0)
    m = MATRModel(ModelConfig(dim=16, heads=2, ffn_dim=16, num_queries=2, seed=1), dtype=torch.float64)
    tokens = torch.randn(4, 16, dtype=torch.float64, requires_grad=True)
    memory = EncoderMemory(tokens, m.memory_positions[:4].double())
    tracks = QuerySet.from_tracks(torch.randn(2, 16, dtype=torch.float64),
                                  torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]],
                                               dtype=torch.float64), [1, 2])
    _, boxes = m.mat_update(tracks, memory)
    grad0 = torch.autograd.grad(boxes.sum(), tokens, allow_unused=True)[0]
    assert grad0 is None or float(grad0.abs().max()) == 0.0

    # one optimizer step on a trajectory-plus-classification objective; the
    # class head is the path that first reaches the zero-initialized projection
    opt = torch.optim.AdamW(m.parameters(), lr=1e-2)
    target = tracks.anchors + 0.05
    fixed = EncoderMemory(tokens.detach(), memory.positions)
    updated, boxes = m.mat_update(tracks, fixed)
    out = m.decode(QuerySet.concat(updated, m.init_queries()), fixed)
    loss = (boxes - target).abs().sum() - torch.log_softmax(out.logits[:2], -1)[:, 0].sum()
    loss.backward()
    opt.step()

    def probe():
        return m.mat_update(tracks, EncoderMemory(tokens, memory.positions))[1].sum()

    grad = torch.autograd.grad(probe(), tokens)[0]
    numeric = central_difference(probe, [tokens])[0]
    assert float(grad.abs().max()) > 0
    np.testing.assert_allclose(grad.numpy(), numeric.numpy(), rtol=1e-4, atol=1e-8)


def test_decode_contracts(model):
    memory = model.encode(_image(1))
    queries = QuerySet.concat(_tracks(model, 2), model.init_queries())
    out = model.decode(queries, memory)
    assert out.boxes.shape == (22, 4) and out.logits.shape == (22, 2)
    np.testing.assert_allclose(out.probs.sum(-1).detach().numpy(), 1.0, atol=1e-6)
    assert len(out.layer_boxes) == len(out.layer_logits) == model.config.dec_layers
    assert torch.equal(out.boxes, out.layer_boxes[-1])
    with pytest.raises(ValueError):
        model.decode(QuerySet.empty(64), memory)


def test_decode_identity_with_one_layer():
    m = MATRModel(ModelConfig(dec_layers=1, seed=2))
    queries = m.init_queries()
    out = m.decode(queries, m.encode(_image(2)))
    np.testing.assert_allclose(out.boxes.detach().numpy(), queries.anchors.detach().numpy(), atol=1e-6)


def test_decode_refinement_composes_layer_by_layer(model):
    memory = model.encode(_image(3))
    # give the zero-initialized box heads nonzero weights on a copy
    m = MATRModel(ModelConfig(seed=3))
    with torch.no_grad():
        for head in m.box_heads:
            head[-1].weight.normal_(0, 0.1)
    queries = m.init_queries()
    out = m.decode(queries, memory)
    x, anchors = queries.features, queries.anchors
    for layer, head, got in zip(m.decoder, m.box_heads, out.layer_boxes):
        x = layer(x, m.query_pos(anchors), memory, anchors)
        anchors = refine_boxes(anchors, head(x))
        torch.testing.assert_close(anchors, got)
    assert not torch.allclose(out.boxes, queries.anchors)


def test_model_determinism_and_checksum():
    a, b = MATRModel(ModelConfig(seed=5)), MATRModel(ModelConfig(seed=5))
    assert a.parameter_checksum() == b.parameter_checksum()
    assert a.parameter_checksum() != MATRModel(ModelConfig(seed=6)).parameter_checksum()


def test_checkpoint_round_trip(tmp_path, model):
    p1 = save_checkpoint(model, tmp_path / "a.ckpt", {"seed": 3})
    p2 = save_checkpoint(model, tmp_path / "b.ckpt", {"seed": 3})
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_checkpoint(p1)
    assert loaded.config == model.config
    assert loaded.parameter_checksum() == model.parameter_checksum()
    img = _image(4)
    torch.testing.assert_close(loaded.encode(img).tokens, model.encode(img).tokens, rtol=0, atol=0)


def test_checkpoint_rejects_unknown_version(tmp_path, model):
    import zipfile

    path = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("version.txt", "other/9\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
