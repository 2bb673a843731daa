import numpy as np
import pytest

from mttgan.clstrain import (
    ClassifierConfig, evaluate, load_classifier, predict, save_classifier, stratified_split, train_classifier,
)
from mttgan.dataset import DatasetError, DatasetManifest, ImageRecord, Label, LeakageError, quantize


def labelled(n_per, labels, res=32, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for j, label in enumerate(labels):
        for i in range(n_per):
            base = 0.2 + 0.6 * j / max(len(labels) - 1, 1)
            img = quantize(np.clip(base + 0.05 * rng.standard_normal((res, res)), 0, 1))
            recs.append(ImageRecord(f"{label.value}/{seed}/{i}", label, data=img))
    return DatasetManifest(tuple(recs))


BIN = (Label.COVID, Label.NORMAL)
CFG = ClassifierConfig(arch="alexnet", num_classes=2, epochs=2, lr=1e-4, resolution=32, batch_size=8)


def test_stratified_split_fraction():
    m = labelled(10, BIN)
    tr, va = stratified_split(m, 0.3, 0)
    assert len(va) == 6 and len(tr) == 14 and not set(tr) & set(va)
    assert sorted(m.records[i].label for i in va).count(Label.COVID) == 3
    assert stratified_split(m, 0.3, 0) == (tr, va)


def test_train_predict_evaluate_roundtrip(tmp_path):
    train = labelled(12, BIN, seed=1)
    test = labelled(5, BIN, seed=2)
    clf = train_classifier(train, CFG, exclude=test)
    assert len(clf.train_history) == 2
    assert len(clf.val_ids) == 8 and not set(clf.val_ids) & set(clf.train_ids)
    preds = predict(clf, test.records)
    assert all(abs(p.sum() - 1) < 1e-6 and lab in BIN for lab, p in preds)
    cm = evaluate(clf, test)
    assert cm.total == 10 and cm.class_order == ("covid", "normal")
    save_classifier(clf, tmp_path / "clf")
    back = load_classifier(tmp_path / "clf")
    assert back.weights.equal(clf.weights) and back.class_order == clf.class_order
    assert [h.train_loss for h in back.train_history] == [h.train_loss for h in clf.train_history]
    np.testing.assert_array_equal(evaluate(back, test).counts, cm.counts)


def test_training_is_deterministic():
    train = labelled(8, BIN, seed=1)
    a = train_classifier(train, CFG)
    b = train_classifier(train, CFG)
    assert a.weights.equal(b.weights)


def test_label_and_leakage_errors():
    train = labelled(6, BIN)
    with pytest.raises(DatasetError):
        train_classifier(labelled(6, (Label.COVID,)), CFG)
    with pytest.raises(LeakageError):
        train_classifier(train, CFG, exclude={train.records[0].id})
    clf = train_classifier(train, ClassifierConfig(arch="alexnet", epochs=1, resolution=32))
    with pytest.raises(DatasetError):
        evaluate(clf, labelled(2, (Label.VIRAL,)))


def test_config_validation():
    with pytest.raises(ValueError):
        ClassifierConfig(val_fraction=0.0)
    with pytest.raises(ValueError):
        ClassifierConfig(num_classes=3)
