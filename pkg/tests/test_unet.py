import numpy as np
import pytest
import torch

from ctbert.config import UNetConfig
from ctbert.exceptions import CorruptInputError, NotFittedError
from ctbert.synthetic import make_phantom
from ctbert.unet import (
    SegModel,
    UNet,
    UNetSegmenter,
    apply_mask,
    dice,
    infer_mask,
    refine_mask,
    segment_slices,
    soft_dice,
    train_unet,
)


def _dice_oracle(a, b):
    a, b = a.astype(bool).ravel(), b.astype(bool).ravel()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    return 2 * inter / (a.sum() + b.sum())


def _small_model(work_size=64):
    net = UNet(depth=2, base_width=4).eval()
    return SegModel(net, input_size=128, work_size=work_size,
                    config=UNetConfig(depth=2, base_width=4, input_size=128, work_size=work_size))


def test_infer_shape_and_range():
    img = make_phantom(np.random.default_rng(0), size=128).image
    for work in (64, 128):
        prob = infer_mask(img, _small_model(work))
        assert prob.shape == (128, 128)
        assert prob.min() >= 0 and prob.max() <= 1


def test_zero_weights_give_half():
    model = _small_model(128)
    with torch.no_grad():
        for p in model.net.parameters():
            p.zero_()
    prob = infer_mask(np.random.default_rng(0).integers(0, 256, (128, 128), dtype=np.uint8), model)
    assert np.all(prob == 0.5)


def test_infer_wrong_size():
    with pytest.raises(CorruptInputError):
        infer_mask(np.zeros((100, 100), np.uint8), _small_model())


def test_lr_zero_keeps_parameters():
    rng = np.random.default_rng(0)
    phs = [make_phantom(rng, size=64) for _ in range(3)]
    cfg = UNetConfig(depth=2, base_width=4, input_size=64, work_size=64, lr=0.0, epochs=1, seed=5)
    torch.manual_seed(5)
    initial = UNet(2, 4).state_dict()
    model = train_unet([p.image for p in phs], [p.lungs for p in phs], cfg)
    delta = sum(float((p.detach() - initial[n]).norm()) for n, p in model.net.named_parameters())
    assert delta == 0.0


def test_empty_corpus():
    with pytest.raises(ValueError, match="empty"):
        train_unet([], [], UNetConfig())


def test_non_binary_mask():
    with pytest.raises(CorruptInputError):
        train_unet([np.zeros((64, 64), np.uint8)], [np.full((64, 64), 7, np.uint8)],
                   UNetConfig(depth=2, base_width=4, input_size=64, work_size=64, epochs=1))


def test_work_size_validation():
    with pytest.raises(ValueError):
        UNetConfig(depth=4, work_size=100)


def test_trained_unet_dice(trained_unet, unet_corpus):
    train, held_out = unet_corpus
    for ph in train[:3] + held_out:
        mask = segment_slices([ph.image], trained_unet)[0]
        assert dice(mask, ph.lungs) >= 0.95


def test_save_load_round_trip(tmp_path, trained_unet, unet_corpus):
    trained_unet.save(tmp_path / "u.pt")
    loaded = SegModel.load(tmp_path / "u.pt")
    img = unet_corpus[1][0].image
    assert np.array_equal(infer_mask(img, loaded), infer_mask(img, trained_unet))


def test_load_rejects_foreign_checkpoint(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(CorruptInputError):
        SegModel.load(tmp_path / "x.pt")


def test_dice_against_oracle(rng):
    a = rng.random((20, 20)) > 0.5
    b = rng.random((20, 20)) > 0.4
    assert dice(a, b) == pytest.approx(_dice_oracle(a, b))
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_soft_dice_perfect():
    t = torch.zeros(1, 1, 8, 8)
    t[..., 2:6, 2:6] = 1
    assert float(soft_dice(t, t)) == pytest.approx(1.0)


def test_refine_fills_hole():
    m = np.zeros((64, 64), bool)
    m[10:50, 10:50] = True
    m[29:32, 29:32] = False
    assert refine_mask(m)[29:32, 29:32].all()


def test_refine_convex_stable():
    yy, xx = np.mgrid[:128, :128]
    disk = (xx - 64) ** 2 + (yy - 64) ** 2 <= 40**2
    out = refine_mask(disk)
    diff = out ^ disk
    # only boundary pixels may flip: each differing pixel touches the disk edge
    edge = disk ^ (np.roll(disk, 1, 0) & np.roll(disk, -1, 0) & np.roll(disk, 1, 1) & np.roll(disk, -1, 1))
    near_edge = edge | np.roll(edge, 1, 0) | np.roll(edge, -1, 0) | np.roll(edge, 1, 1) | np.roll(edge, -1, 1)
    assert not (diff & ~near_edge).any()


def test_refine_empty():
    assert not refine_mask(np.zeros((32, 32), np.uint8)).any()


def test_apply_mask_full_and_empty(rng):
    s = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    assert np.array_equal(apply_mask(s, np.ones((16, 16), bool)), s)
    assert not apply_mask(s, np.zeros((16, 16), bool)).any()


def test_apply_mask_checkerboard():
    s = np.full((16, 16), 100, np.uint8)
    board = (np.add.outer(np.arange(16), np.arange(16)) % 2).astype(bool)
    out = apply_mask(s, board)
    expected = np.array([[100 if board[i, j] else 0 for j in range(16)] for i in range(16)])
    assert np.array_equal(out, expected)


def test_apply_mask_mismatch():
    with pytest.raises(CorruptInputError):
        apply_mask(np.zeros((8, 8)), np.zeros((9, 9)))


def test_segmenter_estimator_params():
    seg = UNetSegmenter(depth=2, base_width=4, input_size=64, work_size=64, epochs=1)
    assert seg.get_params()["depth"] == 2
    with pytest.raises(NotFittedError):
        seg.predict([np.zeros((64, 64), np.uint8)])
    rng = np.random.default_rng(0)
    phs = [make_phantom(rng, size=64) for _ in range(2)]
    seg.fit([p.image for p in phs], [p.lungs for p in phs])
    out = seg.predict([phs[0].image])
    assert out.shape == (1, 64, 64) and out.dtype == bool
