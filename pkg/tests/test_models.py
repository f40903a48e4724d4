import pytest
import torch

from ctbert.exceptions import CorruptInputError
from ctbert.models import BertPoolHead, CNNBert, MeanPoolHead, R2Plus1DBackbone, load_pretrained_backbone

SMALL = dict(layers=(1, 1, 1, 1), widths=(16, 32, 64, 512))


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    return CNNBert(n_frames=32, **SMALL).eval()


def test_temporal_plan():
    bb = R2Plus1DBackbone(**SMALL)
    # three stride-2 temporal downsamplings
    assert [bb.temporal_length(t) for t in (32, 16, 8)] == [4, 2, 1]


def test_feature_shape(small_model):
    clip = torch.randn(2, 32, 3, 64, 64)
    with torch.no_grad():
        feats = small_model.forward_features(clip)
    assert feats.shape == (2, 4, 512)
    assert small_model.head.pos_embedding.shape == (1, 5, 512)


def test_single_clip_unbatched(small_model):
    with torch.no_grad():
        logits, emb = small_model(torch.randn(32, 3, 64, 64))
    assert logits.shape == (1, 2) and emb.shape == (1, 512)


def test_wrong_frame_count(small_model):
    with pytest.raises(CorruptInputError):
        small_model(torch.randn(1, 16, 3, 64, 64))


def test_features_deterministic(small_model):
    clip = torch.randn(1, 32, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(small_model.forward_features(clip), small_model.forward_features(clip.clone()))


def test_zero_clip_finite(small_model):
    with torch.no_grad():
        feats = small_model.forward_features(torch.zeros(1, 32, 3, 64, 64))
        logits, emb = small_model(torch.zeros(1, 32, 3, 64, 64))
    assert torch.isfinite(feats).all() and torch.isfinite(logits).all() and torch.isfinite(emb).all()


def test_attention_rows_sum_to_one():
    head = BertPoolHead(dim=64, n_steps=4, heads=8, dropout=0.0).eval()
    with torch.no_grad():
        _, _, maps = head(torch.randn(3, 4, 64), return_attention=True)
    assert maps[0].shape == (3, 8, 5, 5)
    assert torch.allclose(maps[0].sum(-1), torch.ones(3, 8, 5), atol=1e-6)


def test_bert_not_permutation_invariant():
    head = BertPoolHead(dim=64, n_steps=4, heads=8, dropout=0.0).eval()
    x = torch.randn(1, 4, 64)
    with torch.no_grad():
        a, _ = head(x)
        b, _ = head(x[:, [2, 0, 3, 1]])
    assert not torch.allclose(a, b)


def test_mean_head_permutation_invariant():
    head = MeanPoolHead(dim=64).eval()
    x = torch.randn(2, 4, 64)
    with torch.no_grad():
        a, _ = head(x)
        b, _ = head(x[:, [3, 1, 0, 2]])
    assert a.shape == (2, 2)
    assert torch.allclose(a, b, atol=1e-6)


def test_head_step_mismatch():
    with pytest.raises(ValueError):
        BertPoolHead(dim=64, n_steps=4, heads=8)(torch.randn(1, 3, 64))


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        BertPoolHead(dim=60, n_steps=4, heads=8)


def test_logits_are_linear_of_embedding(small_model):
    with torch.no_grad():
        logits, emb = small_model(torch.randn(2, 32, 3, 64, 64))
        assert torch.equal(logits, small_model.head.classifier(emb))


def test_no_bert_model():
    m = CNNBert(n_frames=32, use_bert=False, **SMALL).eval()
    with torch.no_grad():
        logits, emb = m(torch.randn(1, 32, 3, 64, 64))
    assert logits.shape == (1, 2) and emb.shape == (1, 512)
    assert m.embedding_dim == 512


def test_load_pretrained_backbone(tmp_path, small_model):
    torch.save(small_model.state_dict(), tmp_path / "w.pt")
    other = CNNBert(n_frames=32, **SMALL)
    missing, unexpected = load_pretrained_backbone(other, tmp_path / "w.pt")
    assert not missing
    for (n, p), q in zip(other.backbone.named_parameters(), small_model.backbone.parameters()):
        assert torch.equal(p, q), n
