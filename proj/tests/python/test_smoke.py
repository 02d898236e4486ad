import json

import pytest
import torch

import tforge


@pytest.fixture(scope="module")
def data():
    xtr, ytr, xte, yte = tforge.make_synthetic(n_train=400, n_test=200, seed=7)
    return xtr, ytr, xte, yte


def test_make_synthetic_shapes(data):
    xtr, ytr, xte, yte = data
    assert xtr.shape == (400, 3, 32, 32)
    assert ytr.shape == (400,)
    assert xte.shape == (200, 3, 32, 32)
    assert float(xtr.min()) >= 0.0 and float(xtr.max()) <= 1.0
    assert ytr.dtype == torch.int64


def test_trigger_spec_roundtrip_and_apply(data):
    xtr, _, _, _ = data
    spec = tforge.make_trigger_spec("patch", target_label=0, seed=3)
    doc = json.loads(spec)
    assert doc["family"] == "patch"
    assert doc["target_label"] == 0
    out = tforge.apply_trigger(xtr[:8], spec)
    assert out.shape == (8, 3, 32, 32)
    assert not torch.equal(out, xtr[:8])
    # patch lives in the right-upper corner; the rest of the image is untouched
    assert torch.equal(out[:, :, 3:, :], xtr[:8, :, 3:, :])


def test_poison_dataset_relabels(data):
    xtr, ytr, _, _ = data
    spec = tforge.make_trigger_spec("blend", target_label=2, seed=3)
    px, py_, idx = tforge.poison_dataset(xtr, ytr, spec, 11)
    assert len(idx) == 20  # 5% of 400
    assert all(int(py_[i]) == 2 for i in idx)


def test_ssim_identity(data):
    xtr, _, _, _ = data
    assert tforge.ssim(xtr[:4], xtr[:4]) == pytest.approx(1.0, abs=1e-6)
    assert tforge.ssim(xtr[:4], 1.0 - xtr[:4]) < 0.5


def test_train_and_scan(tmp_path, data):
    xtr, ytr, xte, yte = data
    spec = tforge.make_trigger_spec("patch", target_label=1, seed=5)
    px, py_, _ = tforge.poison_dataset(xtr, ytr, spec, 5)
    ckpt = str(tmp_path / "model.pt")
    tforge.train_model("tiny_cnn", px, py_, epochs=2, seed=5, spec_json=spec,
                       checkpoint_out=ckpt)
    acc, asr = tforge.evaluate_checkpoint(ckpt, xte, yte, spec)
    assert 0.0 <= acc <= 1.0
    assert 0.0 <= asr <= 1.0
    report_json, backdoored, label, max_asr = tforge.scan_checkpoint(
        ckpt, xte, yte, engine="nc", per_class=5, steps=30, seed=5)
    report = json.loads(report_json)
    assert len(report["rows"]) == 10
    assert isinstance(backdoored, bool)
    assert 0.0 <= max_asr <= 1.0
