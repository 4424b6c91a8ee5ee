import math

import numpy as np
import pytest

from amvq import tensor as T
from amvq.codec import CodecConfig, Decoder
from amvq.data import synth_panorama
from amvq.nn import Adam
from amvq.pipeline import AMVQModel
from amvq.tensor import Tensor
from amvq.train import (Discriminator, TrainConfig, Trainer, TrainingError, discriminator_loss, gan_loss,
                        generator_loss, rec_loss, total_objective)

TINY = CodecConfig(base_channels=4, num_scales=2, feature_channels=4, image_height=32, image_width=64)


class ConstantCritic:
    """Stand-in discriminator: a fixed logit for the real image, another for anything else."""

    def __init__(self, real, logit_real, logit_fake):
        self.real, self.lr, self.lf = real, logit_real, logit_fake

    def __call__(self, x):
        logit = self.lr if np.array_equal(x.data, self.real.data) else self.lf
        return Tensor(np.full((1, 1, 2, 2), logit, np.float64))


def images(n=2):
    return [synth_panorama(i, 32) for i in range(n)]


def test_rec_loss_zero():
    x = Tensor(np.ones((3, 4, 4)))
    f = Tensor(np.ones((4, 2)))
    assert rec_loss(x, x, f, f, 0.25).item() == 0.0


def test_rec_loss_sum_of_squares():
    x = np.zeros((3, 4, 4))
    f = Tensor(np.ones((4, 2)))
    assert rec_loss(Tensor(x), Tensor(x + 0.1), f, f).item() == pytest.approx(0.48)


def test_rec_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        rec_loss(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 5))), Tensor(np.zeros((1, 2))),
                 Tensor(np.zeros((1, 2))))


def test_rec_loss_decoder_gradient():
    cfg = CodecConfig(base_channels=2, num_scales=1, feature_channels=3, image_height=4, image_width=4)
    dec = Decoder(cfg, seed=0)
    rng = np.random.default_rng(1)
    feats = Tensor(rng.normal(size=(1, 3, 2, 2)))
    q = Tensor(rng.normal(size=(4, 3)))
    x = Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)))

    def loss(w):
        dec.out.weight = w
        return rec_loss(x, dec(feats), T.reshape(feats, (4, 3)), q, 0.25)

    assert T.gradient_check(loss, dec.out.weight.data) < 1e-3
    assert T.gradient_check(lambda b: (setattr(dec.stem, "bias", b), loss(dec.out.weight))[1],
                            dec.stem.bias.data) < 1e-3


def test_disc_loss_at_zero_logit():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    loss = discriminator_loss(ConstantCritic(x, 0.0, 0.0), x, Tensor(np.ones((1, 3, 4, 4))))
    assert loss.item() == pytest.approx(2 * math.log(2))


def test_perfect_discriminator():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    loss = discriminator_loss(ConstantCritic(x, 1e4, -1e4), x, Tensor(np.ones((1, 3, 4, 4))))
    # logits clamp at +-30, leaving 2 * softplus(-30)
    assert loss.item() == pytest.approx(2 * math.log1p(math.exp(-30)))
    assert loss.item() < 1e-12


def test_discriminator_outputs_patch_map():
    out = Discriminator(width=4)(Tensor(np.zeros((1, 3, 32, 64), np.float32)))
    assert out.shape[1] == 1 and out.shape[2] * out.shape[3] > 1


def _disc_batch(seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, (1, 3, 32, 32))), Tensor(rng.uniform(-1, 1, (1, 3, 32, 32)))


def test_gan_loss_gradients():
    x, x_hat = _disc_batch()
    disc = Discriminator(width=2, seed=0)
    assert T.gradient_check(lambda t: discriminator_loss(disc, x, t), x.data) == 0.0
    assert T.gradient_check(lambda t: discriminator_loss(disc, t, x_hat), x.data) < 1e-3
    assert T.gradient_check(lambda t: generator_loss(disc, t), x_hat.data) < 1e-3

    def through_head(w):
        disc.head.weight = w
        return discriminator_loss(disc, x, x_hat)

    assert T.gradient_check(through_head, disc.head.weight.data) < 1e-3


def test_one_discriminator_step_decreases_loss():
    x, x_hat = _disc_batch(1)
    disc = Discriminator(width=8, seed=0)
    opt = Adam(disc.parameters(), 1e-3)
    before = discriminator_loss(disc, x, x_hat)
    opt.zero_grad()
    T.backward(before)
    opt.step()
    assert discriminator_loss(disc, x, x_hat).item() < before.item()


def test_fifty_discriminator_steps():
    x, x_hat = _disc_batch(2)
    disc = Discriminator(width=8, seed=0)
    opt = Adam(disc.parameters(), 4e-4)
    losses = []
    for _ in range(50):
        loss = discriminator_loss(disc, x, x_hat)
        losses.append(loss.item())
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    assert losses[-1] < losses[0]


def test_total_objective():
    assert total_objective(1.0, 0.5, 0.8) == pytest.approx(1.4)
    assert total_objective(1.0, 123.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        total_objective(1.0, 0.5, -0.1)


def test_gradient_separation():
    x, x_hat_data = _disc_batch(3)
    cfg = CodecConfig(base_channels=2, num_scales=1, feature_channels=2, image_height=32, image_width=32)
    dec = Decoder(cfg, seed=0)
    disc = Discriminator(width=2)
    x_hat = dec(Tensor(np.random.default_rng(0).normal(size=(1, 2, 16, 16))))
    d_loss, g_loss = gan_loss(x, x_hat, disc)
    T.backward(d_loss)
    assert all(p.grad is None for p in dec.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in disc.parameters())
    disc.zero_grad()
    T.backward(g_loss)
    assert all(p.grad is None or not np.any(p.grad) for p in disc.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in dec.parameters())


def test_encoder_receives_gradient():
    model = AMVQModel.create(TINY, K=16, seed=0)
    tr = Trainer(model, TrainConfig(gan_enabled=False))
    tr.train_step(images(1)[0])
    assert all(p.grad is not None for p in model.encoder.parameters())
    assert any(np.any(p.grad != 0) for p in model.encoder.parameters())


def test_logged_total_accounting():
    model = AMVQModel.create(TINY, K=16, seed=0)
    cfg = TrainConfig(gan_start_step=1, lam=0.8)
    tr = Trainer(model, cfg, Discriminator(width=4))
    logs = [tr.train_step(im) for im in images(3)]
    assert logs[0]["gan_g"] == 0.0 and logs[0]["total"] == pytest.approx(logs[0]["rec"], abs=1e-6)
    for rec in logs[1:]:
        assert rec["gan_g"] > 0 and rec["gan_d"] > 0
        assert rec["total"] == pytest.approx(rec["rec"] + 0.8 * rec["gan_g"], abs=1e-6 * max(1, rec["total"]))
        assert rec["rec"] == pytest.approx(rec["distortion"] + rec["vq"] + 0.25 * rec["commit"], rel=1e-5)
    assert set(logs[0]) >= {"rec", "vq", "commit", "gan_g", "gan_d", "raw_fraction", "bpp"}


def test_gan_disabled_is_reconstruction_only():
    model = AMVQModel.create(TINY, K=16, seed=0)
    tr = Trainer(model, TrainConfig(gan_enabled=False, gan_start_step=0, lam=5.0))
    for im in images(2):
        rec = tr.train_step(im)
        assert rec["total"] == rec["rec"] and rec["gan_d"] == 0.0


@pytest.mark.parametrize("mode", ["loss-gradient", "ema"])
def test_loss_traces_deterministic(tmp_path, mode):
    def run(path):
        model = AMVQModel.create(TINY, K=16, seed=4)
        cfg = TrainConfig(steps=4, gan_start_step=2, seed=4, codebook_mode=mode)
        Trainer(model, cfg, Discriminator(width=4, seed=4)).fit(images(3), log_path=path)
        return path.read_bytes()

    a, b = run(tmp_path / "a.ndjson"), run(tmp_path / "b.ndjson")
    assert a == b and a.count(b"\n") == 4


def test_non_finite_loss_aborts():
    model = AMVQModel.create(TINY, K=16, seed=0)
    tr = Trainer(model, TrainConfig(gan_enabled=False))
    x = images(1)[0]
    tr.train_step(x)
    model.decoder.out.bias.data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        tr.train_step(x)


@pytest.mark.parametrize("kw", [dict(lam=-1), dict(lr_generator=0), dict(lr_discriminator=-1e-3),
                                dict(codebook_mode="adam"), dict(batch_size=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.beta, cfg.lam, cfg.threshold, cfg.gan_start_step) == (0.25, 0.8, 0.3, 100)
