import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longdiff.autograd import Tensor, check_gradients, tsum
from longdiff.autograd.tensor import NonFiniteError, ShapeError
from longdiff.gate import (
    GateLossWeights, GateModel, GateTrainConfig, GateTrainer, PatchDiscriminator, RandomFeatureExtractor,
    SlicedAlignConfig, adversarial_losses, gate_total_loss, latent_ks_statistics, latent_samples,
    perceptual_loss, recon_loss, sample_directions, sliced_cdf_loss, train_gate,
)
from longdiff.phantoms import generate_cohort, visit_images


@pytest.fixture(scope="module")
def phantoms():
    return visit_images(generate_cohort(6, np.random.default_rng(3)))


@pytest.fixture(scope="module")
def small_gate():
    return GateModel(32, 4, 8, rng=np.random.default_rng(0))


# ---------------------------------------------------------------- model

def test_encode_decode_shapes_and_determinism(small_gate, phantoms):
    x = phantoms[:2]
    z1, z2 = small_gate.encode(Tensor(x)).data, small_gate.encode(Tensor(x)).data
    assert z1.shape == (2, 4, 8, 8) and np.array_equal(z1, z2)
    single = small_gate.encode(Tensor(x[0]))
    assert single.shape == (4, 8, 8)
    out = small_gate.decode(single)
    assert out.shape == (1, 32, 32)
    assert np.array_equal(out.data, small_gate.decode(single).data)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_shape_errors(small_gate):
    with pytest.raises(ShapeError):
        small_gate.encode(Tensor(np.zeros((1, 1, 16, 16))))
    with pytest.raises(ShapeError):
        small_gate.decode(Tensor(np.zeros((1, 3, 8, 8))))


def test_array_helpers_match_tensor_path(small_gate, phantoms):
    x = phantoms[:5]
    z = small_gate.encode_array(x, batch=2)
    assert np.allclose(z, small_gate.encode(Tensor(x)).data, atol=1e-13)
    assert small_gate.decode_array(z, batch=3).shape == x.shape


def test_discriminator_logits_finite(phantoms):
    logits = PatchDiscriminator(rng=np.random.default_rng(0))(Tensor(phantoms[:2]))
    assert logits.shape == (2, 1, 8, 8) and np.isfinite(logits.data).all()


def test_feature_extractor_frozen_and_seeded(phantoms):
    a, b = RandomFeatureExtractor(seed=5), RandomFeatureExtractor(seed=5)
    assert all(not p.requires_grad for p in a.parameters())
    assert np.array_equal(a.features_array(phantoms[:2]), b.features_array(phantoms[:2]))
    assert not np.array_equal(a.features_array(phantoms[:2]), RandomFeatureExtractor(seed=6).features_array(phantoms[:2]))


# ---------------------------------------------------------------- losses

def test_recon_loss_cases():
    assert recon_loss(Tensor(np.ones(4)), Tensor(np.ones(4))).item() == 0.0
    assert recon_loss(Tensor(np.zeros(4)), Tensor(np.ones(4))).item() == 1.0
    assert recon_loss(Tensor([0.0, 1.0]), Tensor([1.0, 1.0])).item() == 0.5


def test_sample_directions(rng):
    v = sample_directions(64, 5, rng)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9, rtol=0)
    one = sample_directions(50, 1, rng)
    assert set(np.unique(one)) <= {-1.0, 1.0}
    big = sample_directions(10000, 3, rng)
    assert np.all(np.abs(big.mean(axis=0)) < 4 / np.sqrt(10000))
    with pytest.raises(ValueError):
        sample_directions(0, 3, rng)


class ZeroThenNormal:
    """Generator stand-in whose first draw is all zeros, to exercise the re-draw path."""

    def __init__(self):
        self.calls, self.inner = 0, np.random.default_rng(0)

    def standard_normal(self, shape):
        self.calls += 1
        return np.zeros(shape) if self.calls == 1 else self.inner.standard_normal(shape)


def test_sample_directions_redraws_degenerate():
    g = ZeroThenNormal()
    v = sample_directions(3, 2, g)
    assert g.calls == 2 and np.allclose(np.linalg.norm(v, axis=1), 1.0)


def test_sliced_enumeration_and_identity(rng):
    v = sliced_cdf_loss(Tensor([[0.0], [2.0]]), Tensor([[1.0], [3.0]]), np.array([[1.0]]), 2)
    assert v.item() == 1.0
    z = rng.standard_normal((50, 3))
    assert sliced_cdf_loss(Tensor(z), Tensor(z.copy()), sample_directions(8, 3, rng)).item() == 0.0


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_sliced_permutation_invariant(seed, p):
    r = np.random.default_rng(seed)
    z, prior, dirs = r.standard_normal((40, 3)), r.standard_normal((40, 3)), sample_directions(6, 3, r)
    base = sliced_cdf_loss(Tensor(z), Tensor(prior), dirs, p).item()
    perm = sliced_cdf_loss(Tensor(z[r.permutation(40)]), Tensor(prior[r.permutation(40)]), dirs, p).item()
    assert perm == pytest.approx(base, rel=1e-12) and base >= 0


def test_sliced_matched_vs_shifted(rng):
    n, K = 4096, 256
    dirs = sample_directions(K, 4, rng)
    prior = rng.standard_normal((n, 4))
    matched = sliced_cdf_loss(Tensor(rng.standard_normal((n, 4))), Tensor(prior), dirs).item()
    shifted = sliced_cdf_loss(Tensor(rng.standard_normal((n, 4)) + 0.5), Tensor(prior), dirs).item()
    assert shifted >= 10 * matched


def test_sliced_monotone_in_shift(rng):
    dirs = sample_directions(32, 4, rng)
    base, prior = rng.standard_normal((2048, 4)), rng.standard_normal((2048, 4))
    vals = [sliced_cdf_loss(Tensor(base + d), Tensor(prior), dirs).item() for d in (0.5, 1.0, 2.0)]
    assert vals[0] < vals[1] < vals[2]


def test_sliced_errors(rng):
    with pytest.raises(ValueError):
        sliced_cdf_loss(Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2))), np.eye(2))
    with pytest.raises(ValueError):
        sliced_cdf_loss(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))), np.zeros((0, 2)))


def test_sliced_gradient(rng):
    z = Tensor(rng.standard_normal((12, 3)), requires_grad=True)
    prior, dirs = rng.standard_normal((12, 3)), sample_directions(5, 3, rng)
    for p in (2.0, 1.5):
        assert check_gradients(lambda: sliced_cdf_loss(z, Tensor(prior), dirs, p), [z]) < 1e-6


def test_latent_samples_layout(rng):
    z = rng.standard_normal((2, 4, 3, 3))
    s = latent_samples(Tensor(z)).data
    assert s.shape == (18, 4) and np.array_equal(s[4], z[0, :, 1, 1])


def test_perceptual_loss(phantoms):
    phi = RandomFeatureExtractor()
    x = phantoms[:4]
    assert perceptual_loss(Tensor(x), Tensor(x), phi).item() == 0.0
    shifted = np.roll(x, 1, axis=-1)
    m = np.mean((shifted - x) ** 2)
    noise = np.random.default_rng(0).standard_normal(x.shape)
    noisy = x + noise * np.sqrt(m / np.mean(noise ** 2))
    p_shift = perceptual_loss(Tensor(x), Tensor(shifted), phi).item()
    p_noise = perceptual_loss(Tensor(x), Tensor(noisy), phi).item()
    assert 0 < p_shift < p_noise
    with pytest.raises(ShapeError):
        perceptual_loss(Tensor(x), Tensor(x[:, :, :16]), phi)


class ConstDisc:
    def __init__(self, real, fake):
        self.real, self.fake = real, fake

    def __call__(self, x):
        return Tensor(np.full((x.shape[0], 1, 2, 2), self.real if x.data.mean() > 0.5 else self.fake))


def test_adversarial_values():
    x, x_hat = Tensor(np.ones((2, 1, 4, 4))), Tensor(np.zeros((2, 1, 4, 4)))
    d, g = adversarial_losses(x, x_hat, ConstDisc(0.0, 0.0))
    assert d.item() == pytest.approx(2 * np.log(2), abs=1e-15) and g.item() == pytest.approx(np.log(2))
    d, _ = adversarial_losses(x, x_hat, ConstDisc(40.0, -40.0))
    assert 0 < d.item() < 1e-15
    with pytest.raises(NonFiniteError):
        adversarial_losses(x, x_hat, ConstDisc(np.inf, 0.0))


def test_generator_gradient_nonzero(phantoms):
    disc = PatchDiscriminator(width=4, rng=np.random.default_rng(2))
    x_hat = Tensor(phantoms[:1] * 0.9, requires_grad=True)
    _, g = adversarial_losses(Tensor(phantoms[:1]), x_hat, disc)
    g.backward()
    assert np.abs(x_hat.grad).max() > 0


def test_total_loss_weights():
    parts = {k: Tensor(v) for k, v in zip(("rec", "sd", "perc", "adv"), (0.1, 0.2, 0.3, 0.4))}
    assert gate_total_loss(parts, GateLossWeights(1, 1, 1, 1)).item() == pytest.approx(1.0, abs=1e-15)
    assert gate_total_loss(parts, GateLossWeights(1, 0, 0, 0)).item() == 0.1
    with pytest.raises(ValueError):
        GateLossWeights(sd=-0.1)
    with pytest.raises(ValueError):
        GateLossWeights(rec=0.0)
    with pytest.raises(ValueError):
        SlicedAlignConfig(num_projections=0)


def test_total_loss_gradient_is_weighted_sum(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    w = GateLossWeights(0.7, 0.2, 0.3, 0.5)
    comps = {"rec": lambda: tsum(x * x), "sd": lambda: tsum(x * 3.0), "perc": lambda: tsum(x * x * x),
             "adv": lambda: tsum(x * -1.0)}
    gate_total_loss({k: f() for k, f in comps.items()}, w).backward()
    total = x.grad.copy()
    expect = np.zeros(5)
    for k, f in comps.items():
        x.grad = None
        f().backward()
        expect += getattr(w, k) * x.grad
    assert np.allclose(total, expect, atol=1e-14)


def test_ks_statistics(rng):
    dirs = sample_directions(16, 4, rng)
    gauss = latent_ks_statistics(rng.standard_normal((4000, 4)), dirs)
    shifted = latent_ks_statistics(rng.standard_normal((4000, 4)) * 2 + 1, dirs)
    assert np.all(gauss < shifted) and np.all(gauss < 0.05)


# ---------------------------------------------------------------- training

def tiny_trainer(seed=0, **kw):
    cfg = GateTrainConfig(iterations=kw.pop("iterations", 20), batch_size=4, lr=1e-3, **kw)
    return GateTrainer(GateModel(32, 4, 8, rng=np.random.default_rng(seed)), cfg, np.random.default_rng(seed + 1))


def test_adv_off_leaves_disc_untouched(phantoms):
    tr = tiny_trainer()
    before = tr.disc.state_dict()
    for _ in range(3):
        rec = tr.train_step(phantoms)
    assert "disc" not in rec and "adv" not in rec
    after = tr.disc.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_adv_on_trains_disc(phantoms):
    tr = tiny_trainer(weights=GateLossWeights(adv=0.1))
    before = tr.disc.state_dict()
    rec = tr.train_step(phantoms)
    assert "disc" in rec and "adv" in rec
    assert any(not np.array_equal(before[k], v) for k, v in tr.disc.state_dict().items())


def test_training_reproducible_and_resumable(phantoms):
    a = tiny_trainer()
    for _ in range(6):
        a.train_step(phantoms)
    b = tiny_trainer()
    for _ in range(3):
        b.train_step(phantoms)
    tensors, meta = b.state()
    c = tiny_trainer(seed=99)              # different init, fully replaced by the checkpoint
    c.model = GateModel(32, 4, 8, rng=np.random.default_rng(0))
    c = GateTrainer(c.model, c.cfg, np.random.default_rng(5))
    c.load_state(tensors, meta)
    for _ in range(3):
        c.train_step(phantoms)
    assert [h["total"] for h in a.history] == [h["total"] for h in c.history]
    assert all(np.array_equal(v, c.model.state_dict()[k]) for k, v in a.model.state_dict().items())


def test_train_gate_history_and_empty():
    imgs = visit_images(generate_cohort(2, np.random.default_rng(1)))
    model = GateModel(32, 4, 8, rng=np.random.default_rng(0))
    _, hist = train_gate(imgs, model, GateTrainConfig(iterations=4, batch_size=2), np.random.default_rng(0))
    assert len(hist) == 4 and {"rec", "sd", "perc", "total"} <= set(hist[0])
    with pytest.raises(ValueError):
        train_gate(imgs[:0], model, GateTrainConfig(iterations=1), np.random.default_rng(0))


def test_divergence_reports_step(phantoms):
    tr = tiny_trainer()
    tr.model.decoder.conv_out.weight.data[:] = np.nan
    with pytest.raises(NonFiniteError, match="step 0"):
        tr.train_step(phantoms)


def test_reconstruction_improves_over_first_steps():
    imgs = visit_images(generate_cohort(20, np.random.default_rng(2)))
    tr = tiny_trainer(iterations=300)
    for _ in range(300):
        tr.train_step(imgs)
    rec = np.array([h["rec"] for h in tr.history])
    blocks = rec.reshape(5, 60).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)
