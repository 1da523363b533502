import copy

import numpy as np
import pytest

from aegan import functional as F
from aegan import training as T
from aegan.config import NumericalAbort, TrainConfig, TrainState
from aegan.data import DataError, synthetic_dataset
from aegan.networks import AEGAN, NetworkConfig
from aegan.nn import Linear, Module
from aegan.optim import Adam
from aegan.tensor import Tensor, no_grad


@pytest.fixture
def tiny_data(tiny_cfg):
    return synthetic_dataset("shapes", 24, tiny_cfg.resolution, seed=0)


def opts(model, groups, lr=1e-3):
    return T.make_optimizers(model, groups, lr)


class TestAutoencoder:
    def test_overfits_single_image(self, desk_cfg):
        data = synthetic_dataset("shapes", 1, desk_cfg.resolution, seed=3)
        model = AEGAN(desk_cfg, seed=0)
        config = TrainConfig.for_stage("AE", learning_rate=1e-3, batch_size=1, epochs=500, log_every=0)
        state = T.train_autoencoder(data, config, model)
        assert state.global_step == 500
        assert np.mean(state.series("ae_l1")[-10:]) < 0.05

    def test_zero_lr_keeps_parameters_bitwise(self, tiny_model, tiny_data):
        before = {n: p.data.copy() for n, p in tiny_model.named_parameters()}
        T.train_autoencoder(tiny_data, TrainConfig.for_stage("AE", learning_rate=0.0, epochs=1, batch_size=8), tiny_model)
        for n, p in tiny_model.named_parameters():
            np.testing.assert_array_equal(p.data, before[n], err_msg=n)

    def test_initial_loss_in_range(self, tiny_model, tiny_data):
        loss = T.ae_loss(tiny_model, tiny_data.images(range(8))).item()
        assert 0 < loss <= 2

    def test_empty_dataset_rejected(self, tiny_model, tiny_data):
        with pytest.raises(DataError):
            T.train_autoencoder(tiny_data.subset([]), TrainConfig.for_stage("AE"), tiny_model)

    def test_wrong_stage_rejected(self, tiny_model, tiny_data):
        with pytest.raises(ValueError, match="AE-stage"):
            T.train_autoencoder(tiny_data, TrainConfig.for_stage("GAN"), tiny_model)

    def test_only_encoder_and_decoder_move(self, tiny_model, tiny_data):
        sums = {g: T.param_checksum(tiny_model.sub(g)) for g in ("G_E", "D_E", "phi", "D_R", "H")}
        T.train_autoencoder(tiny_data, TrainConfig.for_stage("AE", epochs=1, batch_size=8, learning_rate=1e-3), tiny_model)
        assert {g: T.param_checksum(tiny_model.sub(g)) for g in sums} != sums
        for g in ("G_E", "D_E", "phi", "D_R"):
            assert T.param_checksum(tiny_model.sub(g)) == sums[g]

    def test_history_reproducible(self, tiny_cfg, tiny_data):
        def run():
            model = AEGAN(tiny_cfg, seed=5)
            config = TrainConfig.for_stage("AE", epochs=2, batch_size=8, learning_rate=1e-3, seed=11)
            return T.train_autoencoder(tiny_data, config, model).history

        assert run() == run()

    def test_max_steps_stops_early(self, tiny_model, tiny_data):
        config = TrainConfig.for_stage("AE", epochs=5, batch_size=8, max_steps=4)
        assert T.train_autoencoder(tiny_data, config, tiny_model).global_step == 4

    def test_evaluating_callback_does_not_change_training(self, tiny_cfg, tiny_data):
        config = TrainConfig.for_stage("AE", epochs=3, batch_size=8, learning_rate=1e-3)
        plain, watched = AEGAN(tiny_cfg, seed=5), AEGAN(tiny_cfg, seed=5)
        T.train_autoencoder(tiny_data, config, plain)
        T.train_autoencoder(tiny_data, config, watched, on_epoch_end=lambda s: T.reconstruction_l1(watched, tiny_data))
        for (name, a), (_, b) in zip(plain.named_buffers(), watched.named_buffers()):
            np.testing.assert_array_equal(a, b, err_msg=name)
        assert T.param_checksum(plain) == T.param_checksum(watched)

    def test_non_finite_loss_aborts_with_step(self):
        state = TrainState(global_step=17)
        with pytest.raises(NumericalAbort, match="17"):
            state.record("ae_l1", float("nan"))


class TestConfigDefaults:
    @pytest.mark.parametrize("stage,lr,epochs", [("AE", 1e-5, 100), ("GAN", 2e-4, 200), ("FINETUNE", 1e-7, 100)])
    def test_stage_defaults(self, stage, lr, epochs):
        c = TrainConfig.for_stage(stage)
        assert (c.learning_rate, c.epochs, c.batch_size, c.lambda_pixel) == (lr, epochs, 16, 100.0)

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            TrainConfig(stage="PRETRAIN")

    def test_denoiser_every_defaults_to_pairing(self):
        assert TrainConfig.for_stage("GAN").denoiser_every == 1

    @pytest.mark.parametrize("value", [0, -2])
    def test_denoiser_every_must_be_positive(self, value):
        with pytest.raises(ValueError):
            TrainConfig.for_stage("GAN", denoiser_every=value)


class TestObjectives:
    def test_discriminator_loss_is_two_bce_terms(self, tiny_model, tiny_cfg, rng):
        real = Tensor(rng.standard_normal((3, *tiny_cfg.embedding_shape)).astype(np.float32))
        fake = Tensor(rng.standard_normal((3, *tiny_cfg.embedding_shape)).astype(np.float32))
        tiny_model.eval()
        lr_, lf = tiny_model.D_E(real).data.astype(np.float64), tiny_model.D_E(fake).data.astype(np.float64)
        expected = np.mean(np.log1p(np.exp(-lr_))) + np.mean(np.log1p(np.exp(lf)))
        assert T.discriminator_loss(tiny_model.D_E, real, fake).item() == pytest.approx(expected, rel=1e-5)

    def test_generator_loss_forms(self, tiny_model, tiny_cfg, rng):
        fake = Tensor(rng.standard_normal((4, *tiny_cfg.embedding_shape)).astype(np.float32))
        tiny_model.eval()
        logits = tiny_model.D_E(fake).data.astype(np.float64)
        p = 1 / (1 + np.exp(-logits))
        ns = T.generator_adversarial_loss(tiny_model.D_E, fake).item()
        sat = T.generator_adversarial_loss(tiny_model.D_E, fake, saturating=True).item()
        assert ns == pytest.approx(-np.mean(np.log(p)), rel=1e-5)
        assert sat == pytest.approx(np.mean(np.log(1 - p)), rel=1e-5)

    def test_zero_lambda_is_pure_adversarial(self, tiny_model, tiny_cfg, rng):
        x_hat = Tensor(rng.uniform(-0.9, 0.9, (2, *tiny_cfg.image_shape)).astype(np.float32))
        tiny_model.eval()
        total, adv, pixel = T.denoiser_loss(tiny_model, x_hat, lambda_pixel=0.0)
        assert total.item() == adv.item()
        assert pixel.item() > 0

    def test_joint_equals_sum_of_independent_terms(self, tiny_model, tiny_cfg, tiny_data, rng):
        x = tiny_data.images(range(4))
        z = T.noise(rng, 4, tiny_cfg.noise_dim)
        config = TrainConfig.for_stage("FINETUNE")
        tiny_model.eval()
        with no_grad():
            joint = T.joint_objective(tiny_model, x, Tensor(z), config)["joint"].item()
            ae = T.ae_loss(tiny_model, x).item()
            emb = T.embedding_generator_loss(tiny_model, Tensor(z)).item()
            x_hat = tiny_model.F(tiny_model.G_E(Tensor(z)))
            den = T.denoiser_loss(tiny_model, x_hat, config.lambda_pixel)[0].item()
        assert joint == pytest.approx(ae + emb + den, rel=1e-5)


class TestGanStep:
    def test_freezes_autoencoder(self, tiny_model, tiny_data, rng):
        sums = {"H": T.param_checksum(tiny_model.H), "F": T.param_checksum(tiny_model.F)}
        g_before = T.param_checksum(tiny_model.G_E)
        optimizers = opts(tiny_model, ("G_E", "D_E"))
        for _ in range(3):
            rec = T.gan_step(
                tiny_model, optimizers, rng, TrainConfig.for_stage("GAN"), real_images=tiny_data.images(range(4)), frozen_checksums=sums
            )
        assert {"H": T.param_checksum(tiny_model.H), "F": T.param_checksum(tiny_model.F)} == sums
        assert T.param_checksum(tiny_model.G_E) != g_before
        assert rec["de_loss"] > 0 and rec["ge_loss"] > 0

    def test_detects_tampering(self, tiny_model, tiny_data, rng):
        sums = {"F": T.param_checksum(tiny_model.F)}
        next(iter(tiny_model.F.parameters())).data[...] += 1
        with pytest.raises(T.FrozenParameterError):
            T.gan_step(
                tiny_model, opts(tiny_model, ("G_E", "D_E")), rng, TrainConfig.for_stage("GAN"),
                real_images=tiny_data.images(range(4)), frozen_checksums=sums,
            )

    def test_needs_real_input(self, tiny_model, rng):
        with pytest.raises(ValueError):
            T.gan_step(tiny_model, opts(tiny_model, ("G_E", "D_E")), rng, TrainConfig.for_stage("GAN"))

    def test_critic_separates_toy_embeddings(self, tiny_model, tiny_cfg, rng):
        real = Tensor(rng.normal(2.0, 0.1, (8, *tiny_cfg.embedding_shape)).astype(np.float32))
        opt = Adam(tiny_model.D_E.named_parameters("D_E."), lr=1e-3)
        for _ in range(20):
            fake = tiny_model.G_E(Tensor(T.noise(rng, 8, tiny_cfg.noise_dim))).detach()
            T.discriminator_loss(tiny_model.D_E, real, fake).backward()
            opt.step()
            opt.zero_grad()
        tiny_model.eval()
        with no_grad():
            fake = tiny_model.G_E(Tensor(T.noise(rng, 8, tiny_cfg.noise_dim)))
            assert tiny_model.D_E(real).data.mean() > tiny_model.D_E(fake).data.mean()


class TestDenoiserStep:
    def test_generator_pipeline_frozen(self, tiny_model, tiny_data, rng):
        sums = {g: T.param_checksum(tiny_model.sub(g)) for g in ("G_E", "F", "H")}
        phi_before = T.param_checksum(tiny_model.phi)
        rec = T.denoiser_step(
            tiny_model, opts(tiny_model, ("phi", "D_R")), rng, TrainConfig.for_stage("GAN"),
            tiny_data.images(range(4)), frozen_checksums=sums,
        )
        assert {g: T.param_checksum(tiny_model.sub(g)) for g in sums} == sums
        assert T.param_checksum(tiny_model.phi) != phi_before
        assert rec["phi_loss"] == pytest.approx(rec["phi_adv"] + 100 * rec["phi_pixel"], rel=1e-6)

    def test_pixel_only_training_approaches_identity(self, tiny_model, tiny_cfg, tiny_data, rng):
        config = TrainConfig.for_stage("GAN", adversarial_weight=0.0, lambda_pixel=100.0)
        optimizers = opts(tiny_model, ("phi", "D_R"))
        first = T.denoiser_step(tiny_model, optimizers, rng, config, tiny_data.images(range(8)))["phi_pixel"]
        for _ in range(60):
            last = T.denoiser_step(tiny_model, optimizers, rng, config, tiny_data.images(range(8)))["phi_pixel"]
        assert last < first and last < 0.01

    def test_trained_denoiser_modifies_input(self, tiny_model, tiny_cfg, tiny_data, rng):
        optimizers = opts(tiny_model, ("phi", "D_R"))
        for _ in range(5):
            T.denoiser_step(tiny_model, optimizers, rng, TrainConfig.for_stage("GAN"), tiny_data.images(range(8)))
        x_hat = T.synthesize(tiny_model, T.noise(rng, 4, tiny_cfg.noise_dim))
        with no_grad():
            refined = tiny_model.eval().denoise(Tensor(x_hat)).data
        assert np.abs(refined - x_hat).mean() > 0


class TestTrainGan:
    def test_epoch_checks_and_history(self, tiny_model, tiny_data):
        config = TrainConfig.for_stage("GAN", epochs=1, batch_size=8, learning_rate=1e-3)
        h, f = T.param_checksum(tiny_model.H), T.param_checksum(tiny_model.F)
        state = T.train_gan(tiny_data, config, tiny_model)
        assert state.global_step == 3
        assert {n for _, n, _ in state.history} == {"de_loss", "ge_loss", "dr_loss", "phi_adv", "phi_pixel", "phi_loss"}
        assert (T.param_checksum(tiny_model.H), T.param_checksum(tiny_model.F)) == (h, f)

    def test_without_denoiser(self, tiny_model, tiny_data):
        phi = T.param_checksum(tiny_model.phi)
        config = TrainConfig.for_stage("GAN", epochs=1, batch_size=8)
        T.train_gan(tiny_data, config, tiny_model, train_denoiser=False)
        assert T.param_checksum(tiny_model.phi) == phi

    def test_denoiser_every_thins_denoiser_updates(self, tiny_model, tiny_data):
        config = TrainConfig.for_stage("GAN", epochs=2, batch_size=8, denoiser_every=2)
        state = T.train_gan(tiny_data, config, tiny_model)
        assert len(state.series("ge_loss")) == 6
        # steps 0, 2, 4 of six
        assert len(state.series("dr_loss")) == 3


class TestFinetune:
    def test_one_step_changes_encoder(self, tiny_model, tiny_data, rng):
        before = T.param_checksum(tiny_model.H)
        groups = ("H", "F", "G_E", "D_E", "phi", "D_R")
        config = TrainConfig.for_stage("FINETUNE")
        rec = T.finetune_step(tiny_model, T.make_optimizers(tiny_model, groups, config.learning_rate), rng, config, tiny_data.images(range(4)))
        assert T.param_checksum(tiny_model.H) != before
        assert all(np.isfinite(v) for v in rec.values())
        assert rec["joint"] == pytest.approx(rec["ae_l1"] + rec["ge_loss"] + rec["phi_loss"])

    def test_decoder_statistics_track_real_embeddings_only(self, tiny_model, tiny_data, rng):
        x = tiny_data.images(range(4))
        reference = copy.deepcopy(tiny_model).train()
        with no_grad():
            reference.F(reference.H(Tensor(x)))
        groups = ("H", "F", "G_E", "D_E", "phi", "D_R")
        config = TrainConfig.for_stage("FINETUNE")
        T.finetune_step(tiny_model, T.make_optimizers(tiny_model, groups, config.learning_rate), rng, config, x)
        for (name, a), (_, b) in zip(tiny_model.F.named_buffers(), reference.F.named_buffers()):
            np.testing.assert_array_equal(a, b, err_msg=name)

    def test_missing_optimizer_rejected(self, tiny_model, tiny_data, rng):
        with pytest.raises(ValueError, match="D_R"):
            T.finetune_step(
                tiny_model, opts(tiny_model, ("H", "F", "G_E", "D_E", "phi")), rng, TrainConfig.for_stage("FINETUNE"),
                tiny_data.images(range(4)),
            )

    def test_accumulates_all_three_losses_into_decoder(self, tiny_model, tiny_data, rng):
        """F receives gradient from reconstruction and from both generation losses."""
        config = TrainConfig.for_stage("FINETUNE")
        x = tiny_data.images(range(4))
        z = Tensor(T.noise(rng, 4, tiny_model.cfg.noise_dim))
        tiny_model.train()
        grads = []
        for key in ("ae", "embedding", "denoiser", "joint"):
            tiny_model.zero_grad()
            with T.frozen(tiny_model.D_E, tiny_model.D_R):
                T.joint_objective(tiny_model, x, z, config)[key].backward()
            grads.append(next(iter(tiny_model.F.parameters())).grad.copy() if key != "embedding" else None)
        # the embedding loss never touches F
        ae, den, joint = grads[0], grads[2], grads[3]
        np.testing.assert_allclose(joint, ae + den, rtol=1e-3, atol=1e-6)

    def test_held_statistics_restores_buffers(self, tiny_model, rng):
        z = Tensor(rng.standard_normal((4, tiny_model.cfg.noise_dim)).astype(np.float32))
        before = [b.copy() for _, b in tiny_model.G_E.named_buffers()]
        tiny_model.G_E.train()
        with no_grad(), T.held_statistics(tiny_model.G_E):
            held = tiny_model.G_E(z).data
        for (name, b), old in zip(tiny_model.G_E.named_buffers(), before):
            np.testing.assert_array_equal(b, old, err_msg=name)
        with no_grad():
            np.testing.assert_array_equal(tiny_model.G_E(z).data, held)
        assert any(not np.array_equal(b, old) for (_, b), old in zip(tiny_model.G_E.named_buffers(), before))

    def test_epoch_means(self):
        state = TrainState()
        for v in [1, 3, 5, 7, 9, 11]:
            state.record("joint", v)
        np.testing.assert_array_equal(T.epoch_means(state, "joint", 2), [2, 6, 10])


class TestInference:
    def test_sample_deterministic_and_bounded(self, tiny_model, tiny_cfg):
        a = T.sample(tiny_model, 5, seed=3)
        b = T.sample(tiny_model, 5, seed=3)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (5, *tiny_cfg.image_shape)
        assert a.min() >= -1 and a.max() <= 1
        assert not np.array_equal(a, T.sample(tiny_model, 5, seed=4))

    def test_iter_samples_matches_sample(self, tiny_model):
        joined = np.concatenate(list(T.iter_samples(tiny_model, 7, seed=2, batch_size=3)))
        np.testing.assert_allclose(joined, T.sample(tiny_model, 7, seed=2), atol=1e-6)

    def test_large_count_supported(self, tiny_model):
        assert T.sample(tiny_model, 10000, seed=0, batch_size=2000).shape[0] == 10000

    def test_interpolation_layout(self, tiny_model, tiny_cfg, rng):
        z_a, z_b = T.noise(rng, 2, tiny_cfg.noise_dim)
        frames = T.interpolate(tiny_model, z_a, z_b, steps=10)
        assert frames.shape == (10, *tiny_cfg.image_shape)
        np.testing.assert_array_equal(frames[0], T.generate(tiny_model, z_a[None])[0])
        np.testing.assert_array_equal(frames[-1], T.generate(tiny_model, z_b[None])[0])

    def test_interpolation_path_is_linear(self, rng):
        z_a, z_b = rng.standard_normal(6), rng.standard_normal(6)
        path = T.interpolation_path(z_a, z_b, 5)
        np.testing.assert_allclose(path[2], 0.5 * (z_a + z_b), rtol=1e-6)
        np.testing.assert_array_equal(path[0], z_a.astype(np.float32))

    def test_equal_endpoints_give_identical_frames(self, tiny_model, tiny_cfg, rng):
        z = T.noise(rng, 1, tiny_cfg.noise_dim)[0]
        frames = T.interpolate(tiny_model, z, z, steps=4)
        assert all(np.array_equal(frames[0], f) for f in frames)

    @pytest.mark.parametrize("steps", [0, 1])
    def test_too_few_steps(self, tiny_model, tiny_cfg, steps):
        z = np.zeros(tiny_cfg.noise_dim)
        with pytest.raises(ValueError):
            T.interpolate(tiny_model, z, z, steps=steps)

    def test_wrong_noise_dim(self, tiny_model):
        with pytest.raises(ValueError):
            T.generate(tiny_model, np.zeros((2, 3)))


class _Toy(Module):
    def __init__(self, fin, fout, seed):
        super().__init__()
        self.lin = Linear(fin, fout, np.random.default_rng(seed))

    def forward(self, x):
        return self.lin(x)


class _Critic(_Toy):
    def forward(self, x):
        return self.lin(x).reshape(x.shape[0])


def critic_accuracy(critic, real, fake):
    with no_grad():
        r, f = critic(real).data, critic(fake).data
    return 0.5 * ((r > 0).mean() + (f < 0).mean())


def test_adversarial_antagonism_on_toy_problem():
    """A critic first learns to separate; a generator then pushes it back toward chance."""
    rng = np.random.default_rng(0)
    gen, critic = _Toy(2, 2, 1), _Critic(2, 1, 2)
    real = Tensor(rng.normal(3.0, 0.3, (256, 2)))
    z = Tensor(rng.standard_normal((256, 2)))
    d_opt = Adam(critic.named_parameters(), lr=0.05)
    g_opt = Adam(gen.named_parameters(), lr=0.05)

    for _ in range(200):
        T.discriminator_loss(critic, real, gen(z).detach()).backward()
        d_opt.step()
        d_opt.zero_grad()
    assert critic_accuracy(critic, real, gen(z)) > 0.9

    for step in range(500):
        with T.frozen(critic):
            T.generator_adversarial_loss(critic, gen(z)).backward()
        g_opt.step()
        g_opt.zero_grad()
        if abs(critic_accuracy(critic, real, gen(z)) - 0.5) < 0.1:
            break
    assert abs(critic_accuracy(critic, real, gen(z)) - 0.5) < 0.1, step
