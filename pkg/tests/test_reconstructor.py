import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_parameter_gradients
from signrepair.mask_lab import mask_suite
from signrepair.patch_forge import Generator
from signrepair.reconstructor import (
    CrossViewAttention,
    GeneratorThreat,
    Reconstructor,
    ReconstructorConfig,
    SEBlock,
    fuse_views,
    repair,
    repair_batch,
    repair_objective,
    se_recalibrate,
    train_reconstructor,
    views_tensor,
)
from signrepair.sign_data import Dataset, SignSample
from signrepair.tsr_classifier import Classifier, FrozenModelError, SurrogateCNN, to_tensor


def frozen_classifier(dtype=torch.float32):
    torch.manual_seed(0)
    return Classifier(SurrogateCNN(3).to(dtype), ["a", "b", "c"]).freeze()


def rand_views(r=6, seed=0, batch=None):
    shape = (r, 64, 64, 3) if batch is None else (batch, r, 64, 64, 3)
    return np.random.default_rng(seed).random(shape).astype(np.float32)


# ---------------------------------------------------------------- squeeze-excitation

def test_se_squeeze_of_constant_channels_is_exact():
    consts = torch.tensor([0.1, 0.37, 0.9])
    x = consts[None, :, None, None].expand(2, 3, 64, 64)
    assert torch.equal(SEBlock.squeeze(x), consts.expand(2, 3))


def test_se_unit_weight_is_identity_and_zero_stays_zero():
    se = SEBlock(3)
    se.forced_weight = 1.0
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(se_recalibrate(se, x), x)
    se.forced_weight = None
    assert torch.equal(se(torch.zeros(1, 3, 8, 8)), torch.zeros(1, 3, 8, 8))
    with pytest.raises(ValueError):
        se_recalibrate(se, torch.rand(3, 8, 8))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_se_weights_strictly_inside_unit_interval(seed, scale):
    torch.manual_seed(seed)
    se = SEBlock(3)
    w = se.weights(torch.randn(4, 3, 8, 8, dtype=torch.float32) * scale)
    assert torch.all(w > 0) and torch.all(w < 1)


# ---------------------------------------------------------------- attention

def test_attention_rows_on_simplex():
    torch.manual_seed(0)
    att = CrossViewAttention(3, heads=4)
    _, w = att(torch.randn(2, 10, 6, 3), return_weights=True)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(-1), torch.ones(()), atol=1e-6)


def test_identical_views_give_uniform_weights():
    torch.manual_seed(0)
    att = CrossViewAttention(3, heads=2)
    tok = torch.randn(1, 5, 1, 3).expand(1, 5, 6, 3)
    _, w = att(tok, return_weights=True)
    assert torch.allclose(w, torch.full_like(w, 1 / 6), atol=1e-7)


def brute_force_fuse(tokens, att):
    """Per-position loop over heads and queries for one batch element."""
    p, r, _ = tokens.shape
    out = torch.zeros(p, att.wv.shape[-1], dtype=tokens.dtype)
    for pos in range(p):
        for h in range(att.heads):
            q = tokens[pos] @ att.wq[0, h]
            k = tokens[pos] @ att.wk[0, h]
            v = tokens[pos] @ att.wv[0, h]
            acc = torch.zeros_like(out[pos])
            for i in range(r):
                s = torch.stack([q[i] @ k[j] for j in range(r)]) / att.key_dim ** 0.5
                acc += (torch.softmax(s, 0)[:, None] * v).sum(0)
            out[pos] += acc / r
    return out


def test_attention_matches_brute_force():
    torch.manual_seed(3)
    att = CrossViewAttention(3, heads=2).double()
    tok = torch.randn(1, 4, 5, 3, dtype=torch.float64)
    assert torch.allclose(att(tok)[0], brute_force_fuse(tok[0], att), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_shared_fusion_is_permutation_invariant(seed, perm):
    torch.manual_seed(seed)
    s = Reconstructor(ReconstructorConfig(views=5)).eval()
    views = views_tensor(rand_views(5, seed))
    with torch.no_grad():
        a = s(views)
        b = s(views[:, list(perm)])
    assert torch.allclose(a, b, atol=1e-6)


def test_attention_off_is_uniform_average():
    torch.manual_seed(0)
    att = CrossViewAttention(3, heads=1)
    att.enabled = False
    tok = torch.randn(1, 3, 4, 3)
    _, w = att(tok, return_weights=True)
    assert torch.all(w == 0.25)


# ---------------------------------------------------------------- reconstructor

def test_single_view_rejected():
    s = Reconstructor().eval()
    with pytest.raises(ValueError):
        repair(s, rand_views(1))
    with pytest.raises(ValueError):
        fuse_views(s, [torch.rand(3, 64, 64)])
    with pytest.raises(ValueError):
        repair(s, rand_views(11))


def test_repair_output_shape_and_range():
    torch.manual_seed(0)
    s = Reconstructor().eval()
    for r in (2, 6, 10):
        out = repair(s, rand_views(r, seed=r))
        assert out.shape == (64, 64, 3)
        assert out.min() >= 0 and out.max() <= 1
    feats = [torch.rand(3, 64, 64) for _ in range(4)]
    assert fuse_views(s, feats).shape == (64, 64, 3)


def test_per_view_weights_mode():
    torch.manual_seed(0)
    s = Reconstructor(ReconstructorConfig(shared_weights=False, views=4)).eval()
    assert len(s.extractors) == 4 and s.attention.wq.shape[0] == 4
    assert repair(s, rand_views(4)).shape == (64, 64, 3)
    with pytest.raises(ValueError):
        repair(s, rand_views(5))


def test_objective_on_identity_is_cross_entropy():
    c = frozen_classifier()
    x = to_tensor(rand_views(2))
    y = torch.tensor([0, 2])
    ce = torch.nn.functional.cross_entropy(c.logits(x), y)
    assert torch.equal(repair_objective(c, x, y), ce)
    assert torch.equal(repair_objective(c, x, y, x, 0.1), ce)


def test_objective_gradient_against_finite_differences():
    c = frozen_classifier(torch.float64)
    torch.manual_seed(2)
    s = Reconstructor(ReconstructorConfig(views=3)).double().eval()
    views = views_tensor(rand_views(3, batch=2)).double()
    clean = to_tensor(rand_views(2, seed=5), torch.float64)
    y = torch.tensor([1, 0])

    def objective():
        return repair_objective(c, s(views), y, clean, 0.1)

    check_parameter_gradients(objective, s.parameters())


def tiny_dataset():
    x = rand_views(6, seed=9)
    return Dataset([SignSample(x[i], i % 3, "abc"[i % 3], f"g{i}", f"s{i}") for i in range(6)], ["a", "b", "c"])


def test_training_contracts():
    c = frozen_classifier()
    threat = GeneratorThreat(Generator(widths=(4, 4, 4, 4)).eval(), mask_suite([1]))
    cfg = ReconstructorConfig(views=3, steps=3, batch_size=4, lr=1e-3)
    before = c.param_hash()
    run = train_reconstructor(c, tiny_dataset(), threat, cfg)
    assert c.param_hash() == before
    assert run.loss_curve[-1]["step"] == 3
    again = train_reconstructor(c, tiny_dataset(), threat, cfg)
    v = rand_views(3, batch=2)
    np.testing.assert_array_equal(repair_batch(run.reconstructor, v), repair_batch(again.reconstructor, v))
    with pytest.raises(TypeError):
        train_reconstructor(c, tiny_dataset(), object(), cfg)
    with pytest.raises(FrozenModelError):
        train_reconstructor(Classifier(SurrogateCNN(3), ["a", "b", "c"]), tiny_dataset(), threat, cfg)


def test_checkpoint_round_trip():
    torch.manual_seed(0)
    s = Reconstructor(ReconstructorConfig(views=4)).eval()
    back = Reconstructor.from_checkpoint(s.to_checkpoint())
    v = rand_views(4)
    assert np.array_equal(repair(s, v), repair(back, v))
