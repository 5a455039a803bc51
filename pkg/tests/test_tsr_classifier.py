import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from signrepair.sign_data import Dataset, SignSample
from signrepair.tsr_classifier import (
    Classifier,
    ClassifierConfig,
    SurrogateCNN,
    evaluate,
    feature_profile,
    feature_similarity,
    input_gradient,
    metrics_from_predictions,
    predict,
    predict_batch,
    state_hash,
    to_tensor,
    train_classifier,
)


def make_classifier(num_classes=4, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    net = SurrogateCNN(num_classes).to(dtype)
    return Classifier(net, [f"c{k}" for k in range(num_classes)]).freeze()


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 64, 64, 3)).astype(np.float32)


def blob_dataset(classes=3, per_class=12, seed=0):
    """Trivially separable classes: each is a flat image of its own colour plus noise."""
    rng = np.random.default_rng(seed)
    palette = np.eye(3, dtype=np.float32)
    samples = []
    for label in range(classes):
        for i in range(per_class):
            img = np.clip(palette[label % 3] * 0.8 + rng.normal(0, 0.05, (64, 64, 3)), 0, 1).astype(np.float32)
            samples.append(SignSample(img, label, f"c{label}", f"g{label}-{i}", f"s{label}-{i}",
                                      "test" if i < 3 else "train"))
    return Dataset(samples, [f"c{k}" for k in range(classes)])


def test_metrics_small_example():
    m = metrics_from_predictions([0, 1, 1], [0, 0, 1], 2)
    assert m.accuracy == pytest.approx(2 / 3)
    assert m.per_class_precision.tolist() == [0.5, 1.0]


def test_metrics_all_correct_and_counts():
    m = metrics_from_predictions([0, 1, 2], [0, 1, 2], 3)
    assert m.accuracy == 1.0 and m.per_class_precision.tolist() == [1.0, 1.0, 1.0]
    rng = np.random.default_rng(0)
    big = metrics_from_predictions(rng.integers(0, 5, 200), rng.integers(0, 5, 200), 5)
    assert big.confusion.sum() == 200
    assert big.accuracy == np.trace(big.confusion) / 200


def test_never_predicted_class_flagged():
    m = metrics_from_predictions([0, 1], [0, 0], 3)
    assert m.precision_undefined.tolist() == [False, True, True]
    assert m.per_class_precision[1] == 0.0
    with pytest.raises(ValueError):
        metrics_from_predictions([], [], 3)


def test_probabilities_sum_to_one():
    c = make_classifier()
    _, probs = predict_batch(c, images(5))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    label, p = predict(c, images(1)[0])
    assert label == int(np.argmax(p))


def test_zero_head_gives_uniform_probabilities():
    c = make_classifier(num_classes=7)
    with torch.no_grad():
        c.net.fc2.weight.zero_()
        c.net.fc2.bias.zero_()
    _, probs = predict_batch(c, images(3))
    np.testing.assert_allclose(probs, 1 / 7, atol=1e-12)


def test_predict_rejects_wrong_shape():
    c = make_classifier()
    with pytest.raises(ValueError):
        predict(c, np.zeros((32, 32, 3), np.float32))
    with pytest.raises(ValueError):
        evaluate(c, np.zeros((0, 64, 64, 3), np.float32), np.zeros(0, int))


def test_self_similarity_is_one():
    c = make_classifier()
    x = images(1)[0]
    sims = feature_similarity(c, x, x)
    assert set(sims) == {"conv1", "conv2", "conv3", "fc1", "fc2"}
    for v in sims.values():
        assert v == pytest.approx(1.0, abs=1e-9)


def test_negated_input_first_layer_similarity():
    c = make_classifier()
    with torch.no_grad():
        c.net.convs[0].bias.zero_()
    x = images(1)[0] - 0.5
    assert feature_similarity(c, x, -x)["conv1"] == pytest.approx(-1.0, abs=1e-9)


def test_zero_norm_layer_flagged():
    c = make_classifier()
    with torch.no_grad():
        c.net.convs[0].bias.zero_()
    sims = feature_similarity(c, np.zeros((64, 64, 3), np.float32), images(1)[0])
    assert sims["conv1"] is None


def test_feature_profile_shapes():
    prof = feature_profile(make_classifier(), images(1)[0])
    assert prof["conv1"].shape == (16, 64, 64)
    assert prof["conv3"].shape == (64, 16, 16)
    assert prof["fc2"].shape == (4,)


def test_input_gradient_matches_finite_differences():
    c = make_classifier(dtype=torch.float64)
    x = to_tensor(images(2, seed=3), torch.float64)
    y = torch.tensor([1, 3])
    grad = input_gradient(c, x, y)
    rng = np.random.default_rng(0)
    h = 1e-4
    for _ in range(12):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (torch.nn.functional.cross_entropy(c.logits(xp), y)
                  - torch.nn.functional.cross_entropy(c.logits(xm), y)) / (2 * h)
        rel = abs(fd.item() - grad[idx].item()) / max(abs(fd.item()), abs(grad[idx].item()), 1e-12)
        assert rel < 1e-3 or abs(fd.item() - grad[idx].item()) < 1e-10


def test_state_hash_tracks_parameters():
    c = make_classifier()
    h = c.param_hash()
    assert h == state_hash(c.net)
    with torch.no_grad():
        c.net.fc2.bias.add_(1.0)
    assert c.param_hash() != h


def test_training_is_seeded_and_separates_blobs():
    d = blob_dataset()
    cfg = ClassifierConfig(epochs=3, lr=1e-3, batch_size=8)
    a = train_classifier(d, cfg)
    b = train_classifier(d, cfg)
    assert a.frozen and a.param_hash() == b.param_hash()
    x, y = d.arrays("test")
    assert evaluate(a, x, y).accuracy == 1.0


def test_training_rejects_missing_class():
    d = blob_dataset(classes=3)
    d.samples = [s for s in d.samples if not (s.label == 2 and s.split == "train")]
    with pytest.raises(ValueError):
        train_classifier(d, ClassifierConfig(epochs=1))
    single = Dataset([s for s in blob_dataset().samples if s.label == 0], ["c0"])
    with pytest.raises(ValueError):
        train_classifier(single, ClassifierConfig(epochs=1))


def test_checkpoint_round_trip():
    c = make_classifier()
    back = Classifier.from_checkpoint(c.to_checkpoint())
    assert back.frozen and back.param_hash() == c.param_hash()
    x = images(2)
    np.testing.assert_array_equal(predict_batch(c, x)[1], predict_batch(back, x)[1])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_metrics_recomputed_from_confusion(pairs):
    truth, pred = zip(*pairs)
    m = metrics_from_predictions(truth, pred, 4)
    assert m.accuracy == sum(t == p for t, p in pairs) / len(pairs)
    for k in range(4):
        predicted = [t for t, p in pairs if p == k]
        if predicted:
            assert m.per_class_precision[k] == sum(t == k for t in predicted) / len(predicted)
        else:
            assert m.precision_undefined[k]
