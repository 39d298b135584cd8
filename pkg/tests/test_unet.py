import numpy as np
import pytest
from scipy import stats

from longdiff.autograd import Tensor, check_gradients, hash_parameters, tsum
from longdiff.autograd.tensor import ShapeError
from longdiff.diffusion import SamplerConfig, make_schedule, sample_latent
from longdiff.gate import GateModel
from longdiff.phantoms import generate_cohort, progress_covariates, visit_images
from longdiff.unet import (
    COND_DIM, NUM_TOKENS, CondEmbedder, ConditionalDenoiser, CrossAttention, DiffusionTrainConfig,
    DiffusionTrainer, PairData, StepCond, UNetConfig, UNetDenoiser, build_control_branch, cond_embed, cond_matrix,
    encode_baseline, timestep_embedding, train_diffusion,
)

TINY = dict(latent_channels=4, latent_size=8, base_width=16, token_dim=16, d_state=4)


def tiny_unet(seed=0, **kw):
    return UNetDenoiser(UNetConfig(**{**TINY, **kw}), np.random.default_rng(seed))


def rand_cond(rng, n):
    c = rng.standard_normal((n, COND_DIM))
    c[:, 9:] = np.eye(3)[rng.integers(0, 3, n)]
    return c


def pair_data(rng, n=12):
    return PairData(rng.standard_normal((n, 4, 8, 8)), rng.standard_normal((n, 4, 8, 8)), rand_cond(rng, n))


# ---------------------------------------------------------------- config and conditioning

def test_config_validation():
    for bad in (dict(base_width=0), dict(channel_mult=(1,)), dict(mixer="rnn"), dict(latent_size=7),
                dict(blocks_per_level=0)):
        with pytest.raises(ValueError):
            UNetConfig(**{**TINY, **bad})
    assert UNetConfig().base_width == 64 and UNetConfig().d_state == 16 and UNetConfig().time_dim == 64


def test_cond_matrix_from_vectors():
    s = generate_cohort(1, np.random.default_rng(0))[0]
    cv = progress_covariates(s, s.baseline_age + 1)
    m = cond_matrix([cv, cv])
    assert m.shape == (2, COND_DIM) and m[0, 9:].sum() == 1.0
    with pytest.raises(ShapeError):
        cond_matrix(np.zeros((2, 5)))


def test_timestep_embedding():
    e = timestep_embedding(np.array([0, 5]), 8)
    assert e.shape == (2, 8) and np.array_equal(e[0, :4], np.ones(4)) and np.array_equal(e[0, 4:], np.zeros(4))
    assert timestep_embedding(3, 7).shape == (1, 7)


def test_cond_embed_tokens(rng):
    emb = CondEmbedder(16, 8, rng)
    c = rand_cond(rng, 3)
    tok = cond_embed(emb, c, np.array([1, 2, 3]))
    assert tok.shape == (3, NUM_TOKENS, 16) and NUM_TOKENS == 10 + 1
    assert np.array_equal(tok.data, cond_embed(emb, c.copy(), np.array([1, 2, 3])).data)
    assert np.array_equal(tok.data[0], tok.data[0])
    f = rng.standard_normal(tok.shape)
    assert check_gradients(lambda: tsum(cond_embed(emb, c, np.array([1, 2, 3])) * f), emb.parameters()) < 1e-6


# ---------------------------------------------------------------- cross-attention

def test_cross_attention_zero_value_passthrough(rng):
    xa = CrossAttention(8, 6, rng)
    xa.v.weight.data[:] = 0.0
    xa.o.bias.data[:] = 0.0
    seq = rng.standard_normal((2, 5, 8))
    assert np.array_equal(xa(Tensor(seq), Tensor(rng.standard_normal((2, 3, 6)))).data, seq)


def test_cross_attention_single_token(rng):
    xa = CrossAttention(8, 6, rng)
    seq, tok = rng.standard_normal((2, 5, 8)), rng.standard_normal((2, 1, 6))
    out = xa(Tensor(seq), Tensor(tok)).data
    expect = seq + xa.o(xa.v(Tensor(tok))).data                 # weight 1 on the only key
    assert np.allclose(out, expect, atol=1e-13)


def test_cross_attention_token_permutation_invariant(rng):
    xa = CrossAttention(8, 6, rng)
    seq, tok = rng.standard_normal((2, 5, 8)), rng.standard_normal((2, 4, 6))
    a = xa(Tensor(seq), Tensor(tok)).data
    b = xa(Tensor(seq), Tensor(tok[:, rng.permutation(4)])).data
    assert np.allclose(a, b, atol=1e-13)


def test_cross_attention_width_errors(rng):
    xa = CrossAttention(8, 6, rng)
    with pytest.raises(ShapeError):
        xa(Tensor(np.zeros((1, 3, 7))), Tensor(np.zeros((1, 2, 6))))
    with pytest.raises(ShapeError):
        xa(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((1, 2, 5))))


# ---------------------------------------------------------------- denoiser

@pytest.mark.parametrize("mixer", ["mamba", "attention", "none"])
@pytest.mark.parametrize("levels", [(1, 2), (1, 2, 2)])
def test_output_shape_matrix(rng, mixer, levels):
    unet = tiny_unet(mixer=mixer, channel_mult=levels)
    z = rng.standard_normal((2, 4, 8, 8))
    assert unet(z, np.array([3, 700]), rand_cond(rng, 2)).shape == z.shape


def test_denoiser_shape_errors(rng):
    unet = tiny_unet()
    with pytest.raises(ShapeError):
        unet(rng.standard_normal((2, 4, 4, 4)), 1, rand_cond(rng, 2))
    with pytest.raises(ShapeError):
        unet(rng.standard_normal((2, 4, 8, 8)), 1, rand_cond(rng, 3))


def test_denoiser_grad_check(rng):
    unet = tiny_unet(mixer="mamba", base_width=8, token_dim=8, d_state=2)
    z = rng.standard_normal((1, 4, 8, 8))
    cond, f = rand_cond(rng, 1), rng.standard_normal((1, 4, 8, 8))
    params = [unet.encoder.conv_in.bias, unet.decoder.conv_out.bias, unet.embed.scalar_w]
    assert check_gradients(lambda: tsum(unet(z, np.array([10]), cond) * f), params) < 1e-4


# ---------------------------------------------------------------- control branch

def test_zero_init_identity_and_bookkeeping(rng):
    unet = tiny_unet()
    before = hash_parameters(unet)
    ctrl = build_control_branch(unet, np.random.default_rng(1))
    assert ctrl.stage1_hash == before == hash_parameters(unet)
    assert not any(p.requires_grad for p in unet.parameters())
    frozen = {id(p) for p in unet.parameters()}
    assert frozen.isdisjoint(id(p) for p in ctrl.trainable_parameters())
    own = dict(unet.encoder.named_parameters())
    assert all(np.array_equal(own[k].data, v.data) for k, v in ctrl.copy.named_parameters())
    for _ in range(3):
        z, c, hint = rng.standard_normal((2, 4, 8, 8)), rand_cond(rng, 2), rng.standard_normal((2, 4, 8, 8))
        t = rng.integers(0, 1000, 2)
        assert np.array_equal(unet(z, t, c).data, unet(z, t, c, control=ctrl, hint=hint).data)
    with pytest.raises(ValueError):
        unet(z, t, c, control=ctrl)


def test_stage2_step_keeps_frozen_weights_and_moves_branch(rng):
    unet = tiny_unet()
    ctrl = build_control_branch(unet, np.random.default_rng(1))
    sched = make_schedule(1000)
    tr = DiffusionTrainer(2, unet, sched, DiffusionTrainConfig(3, 4, 1e-3), np.random.default_rng(0), ctrl)
    frozen, branch = hash_parameters(unet), hash_parameters(ctrl)
    data = pair_data(rng)
    for _ in range(3):
        tr.train_step(data)
    assert hash_parameters(unet) == frozen and hash_parameters(ctrl) != branch
    assert not np.array_equal(unet(data.z_target[:2], 5, data.cond[:2]).data,
                              unet(data.z_target[:2], 5, data.cond[:2], control=ctrl, hint=data.z_base[:2]).data)


def test_stage2_prerequisites(rng):
    unet, sched, cfg = tiny_unet(), make_schedule(100), DiffusionTrainConfig(1, 2)
    with pytest.raises(ValueError):
        DiffusionTrainer(2, unet, sched, cfg, rng)
    ctrl = build_control_branch(unet)
    unet.unfreeze()
    with pytest.raises(ValueError):
        DiffusionTrainer(2, unet, sched, cfg, rng, ctrl)
    unet.freeze()
    unet.encoder.conv_in.bias.data = unet.encoder.conv_in.bias.data + 1.0
    with pytest.raises(ValueError, match="different stage-1"):
        DiffusionTrainer(2, unet, sched, cfg, rng, ctrl)


def test_stage2_initial_loss_equals_stage1(rng):
    unet = tiny_unet()
    sched = make_schedule(1000)
    data = pair_data(rng)
    t1 = DiffusionTrainer(1, unet, sched, DiffusionTrainConfig(1, 6), np.random.default_rng(4))
    batch = t1.batch(data)
    l1 = t1.loss(data, *batch).item()
    ctrl = build_control_branch(unet)
    t2 = DiffusionTrainer(2, unet, sched, DiffusionTrainConfig(1, 6), np.random.default_rng(4), ctrl)
    assert t2.loss(data, *batch).item() == l1


def test_training_reproducible_and_resumable(rng):
    data, sched = pair_data(rng), make_schedule(1000)
    cfg = DiffusionTrainConfig(6, 4, 1e-3)
    _, h_full = train_diffusion(1, data, tiny_unet(), sched, cfg, np.random.default_rng(2))
    _, h_again = train_diffusion(1, data, tiny_unet(), sched, cfg, np.random.default_rng(2))
    assert h_full == h_again
    part = DiffusionTrainer(1, tiny_unet(), sched, cfg, np.random.default_rng(2))
    for _ in range(3):
        part.train_step(data)
    tensors, meta = part.state()
    resumed = DiffusionTrainer(1, tiny_unet(seed=9), sched, cfg, np.random.default_rng(77))
    resumed.load_state(tensors, meta)
    while resumed.step < 6:
        resumed.train_step(data)
    assert [h["loss"] for h in resumed.history] == [h["loss"] for h in h_full]


def test_stage2_checkpoint_refuses_other_stage1(rng):
    sched = make_schedule(100)
    unet = tiny_unet()
    ctrl = build_control_branch(unet)
    tr = DiffusionTrainer(2, unet, sched, DiffusionTrainConfig(1, 2), rng, ctrl)
    tensors, meta = tr.state()
    other = tiny_unet(seed=5)
    tr2 = DiffusionTrainer(2, other, sched, DiffusionTrainConfig(1, 2), rng, build_control_branch(other))
    with pytest.raises(ValueError):
        tr2.load_state(tensors, meta)
    with pytest.raises(ValueError):
        DiffusionTrainer(1, tiny_unet(), sched, DiffusionTrainConfig(1, 2), rng).load_state(tensors, meta)


def test_pair_data_validation():
    with pytest.raises(ValueError):
        PairData(np.zeros((2, 4, 8, 8)), np.zeros((3, 4, 8, 8)), np.zeros((3, 12)))
    with pytest.raises(ValueError):
        PairData(np.zeros((0, 4, 8, 8)), np.zeros((0, 4, 8, 8)), np.zeros((0, 12)))


# ---------------------------------------------------------------- baseline encoding

def test_encode_baseline_deterministic_and_distinct():
    gate = GateModel(32, 4, 8, rng=np.random.default_rng(0)).freeze()
    imgs = visit_images(generate_cohort(4, np.random.default_rng(1)))
    a, b = encode_baseline(gate, imgs), encode_baseline(gate, imgs)
    assert np.array_equal(a, b) and a.shape[1:] == (4, 8, 8)
    flat = a.reshape(len(a), -1)
    d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    assert np.all(d[~np.eye(len(a), dtype=bool)] > 0)
    unet = tiny_unet()
    ctrl = build_control_branch(unet, np.random.default_rng(3))
    for zc in ctrl.zero_skips + [ctrl.zero_mid, ctrl.zero_in]:
        zc.weight.data = np.random.default_rng(4).standard_normal(zc.weight.shape) * 0.1
    temb, tok = unet.context(np.array([10, 10]), np.zeros((2, 12)) + np.eye(12)[9])
    z = np.zeros((2, 4, 8, 8))
    _, m0 = ctrl(z, a[:2], temb, tok)
    assert np.linalg.norm(m0.data[0] - m0.data[1]) > 0


def test_untrained_gate_flag_rejected():
    gate = GateModel(32, 4, 8)
    gate.trained = False
    with pytest.raises(ValueError):
        encode_baseline(gate, np.zeros((1, 1, 32, 32)))


# ---------------------------------------------------------------- training signal

@pytest.fixture(scope="module")
def trained_tiny():
    rng = np.random.default_rng(0)
    n = 64
    cond = rand_cond(rng, n)
    # targets depend on the projected-age field, so the model has something to learn
    target = np.broadcast_to(cond[:, :1, None, None], (n, 4, 8, 8)) + 0.1 * rng.standard_normal((n, 4, 8, 8))
    data = PairData(np.zeros_like(target), np.ascontiguousarray(target), cond)
    unet = tiny_unet(mixer="none")
    _, hist = train_diffusion(1, data, unet, make_schedule(1000), DiffusionTrainConfig(300, 8, 1e-3),
                              np.random.default_rng(1))
    return unet, data, hist


def test_loss_decreases_over_first_steps(trained_tiny):
    _, _, hist = trained_tiny
    blocks = np.array([h["loss"] for h in hist]).reshape(3, 100).mean(axis=1)
    assert blocks[0] > blocks[1] > blocks[2]


def test_conditioning_sensitivity(trained_tiny):
    unet, data, _ = trained_tiny
    sched = make_schedule(1000)
    cfg = SamplerConfig(num_ddim_steps=10, num_latent_samples=1)
    base = data.cond[:16].copy()
    older = base.copy()
    older[:, 0] += 10.0 / 7.0                            # +10 toy-years on a z-scored age of std ~7
    model = ConditionalDenoiser(unet)
    z0 = sample_latent(model, StepCond(base), sched, cfg, np.random.default_rng(0), (16, 4, 8, 8))
    z1 = sample_latent(model, StepCond(older), sched, cfg, np.random.default_rng(0), (16, 4, 8, 8))
    z0b = sample_latent(model, StepCond(base), sched, cfg, np.random.default_rng(0), (16, 4, 8, 8))
    assert np.array_equal(z0, z0b)                       # same seed: no sampling noise
    shift = (z1 - z0).reshape(16, -1).mean(axis=1)
    # the trained targets grow with age, so the older latents should mostly move up
    assert np.all(np.abs(shift) > 0) and shift.mean() > 0 and (shift > 0).mean() >= 0.75
    assert stats.wilcoxon(shift, alternative="greater").pvalue < 0.01
