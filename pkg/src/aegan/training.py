"""Staged AEGAN training, sampling and latent interpolation.

Step 1 fits the autoencoder (H, F) with an L1 reconstruction loss.  Step 2
freezes it and alternates embedding-GAN updates (D_E then G_E) with denoiser
updates (D_R then phi), one of each per iteration unless ``denoiser_every``
thins the denoiser updates.  The optional Step 3 updates the
two critics first, then accumulates the gradients of the reconstruction,
embedding-generator and denoiser losses into H, F, G_E and phi before a single
Adam step each.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .config import TrainConfig, TrainState
from .data import DataError, DatasetHandle
from .networks import AEGAN
from .nn import Module
from .optim import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

STAGE_SEED = {"AE": 1, "GAN": 2, "FINETUNE": 3}
BETA1 = 0.9

EpochCallback = Callable[[TrainState], None]


class FrozenParameterError(RuntimeError):
    """A sub-network that must stay fixed during a stage was modified."""


def param_checksum(module: Module) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def frozen(*modules: Module) -> Iterator[None]:
    """Stop gradient accumulation into the modules' parameters (inputs still get gradients)."""
    params = [p for m in modules for p in m.parameters()]
    try:
        for p in params:
            p.requires_grad = False
        yield
    finally:
        for p in params:
            p.requires_grad = True


@contextlib.contextmanager
def held_statistics(module: Module) -> Iterator[None]:
    """Train-mode forwards inside leave the module's BN running buffers as they were."""
    saved = [buf.copy() for _, buf in module.named_buffers()]
    try:
        yield
    finally:
        for (_, buf), old in zip(module.named_buffers(), saved):
            buf[...] = old


def make_optimizers(model: AEGAN, groups, lr: float, d_lr: float | None = None) -> dict[str, Adam]:
    d_lr = lr if d_lr is None else d_lr
    return {
        g: Adam(model.sub(g).named_parameters(f"{g}."), lr=d_lr if g.startswith("D_") else lr, beta1=BETA1)
        for g in groups
    }


def noise(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Standard-normal prior samples."""
    return rng.standard_normal((count, dim)).astype(np.float32)


def _batches(data: DatasetHandle, config: TrainConfig, epoch: int) -> Iterator[np.ndarray]:
    order = np.random.default_rng([config.seed, STAGE_SEED[config.stage], epoch]).permutation(len(data))
    for start in range(0, len(data), config.batch_size):
        yield data.images(order[start : start + config.batch_size])


def _step_rng(config: TrainConfig, state: TrainState) -> np.random.Generator:
    """Noise stream keyed by step, so a resumed run draws what the uninterrupted run would."""
    return np.random.default_rng([config.seed, STAGE_SEED[config.stage], state.global_step])


def _require_data(data: DatasetHandle) -> None:
    if data is None or len(data) == 0:
        raise DataError("training needs a non-empty dataset")


def _step_all(optimizers: dict[str, Adam], groups) -> None:
    for g in groups:
        optimizers[g].step()
        optimizers[g].zero_grad()


def _log_progress(state: TrainState, config: TrainConfig, names) -> None:
    if config.log_every and state.global_step % config.log_every == 0:
        parts = " ".join(f"{n}={state.last(n):.4f}" for n in names)
        log.info("[%s] epoch %d step %d %s", state.stage, state.epoch, state.global_step, parts)


def _done(state: TrainState, config: TrainConfig) -> bool:
    return config.max_steps is not None and state.global_step >= config.max_steps


# -- objective terms -----------------------------------------------------------


def ae_loss(model: AEGAN, x) -> Tensor:
    """Mean absolute reconstruction error of F(H(x))."""
    x = Tensor(x) if not isinstance(x, Tensor) else x
    return F.l1_loss(model.F(model.H(x)), x)


def discriminator_loss(critic: Module, real, fake) -> Tensor:
    """-(log D(real) + log(1 - D(fake))): the critic ascends the adversarial objective."""
    return F.bce_with_logits(critic(real), 1.0) + F.bce_with_logits(critic(fake), 0.0)


def generator_adversarial_loss(critic: Module, fake, saturating: bool = False) -> Tensor:
    """Generator side of the adversarial objective.

    Non-saturating: -log D(fake).  Saturating: log(1 - D(fake)), the literal minimax term.
    """
    if saturating:
        return -F.bce_with_logits(critic(fake), 0.0)
    return F.bce_with_logits(critic(fake), 1.0)


def embedding_generator_loss(model: AEGAN, z, saturating: bool = False) -> Tensor:
    return generator_adversarial_loss(model.D_E, model.G_E(z), saturating)


def denoiser_loss(
    model: AEGAN, x_hat, lambda_pixel: float, adversarial_weight: float = 1.0, saturating: bool = False
) -> tuple[Tensor, Tensor, Tensor]:
    """Denoiser objective on synthetic images ``x_hat``: adversarial term + lambda * L1(phi(x_hat), x_hat).

    Returns (total, adversarial, pixel).
    """
    refined = model.phi(x_hat)
    adv = generator_adversarial_loss(model.D_R, refined, saturating)
    pixel = F.l1_loss(refined, x_hat)
    return adversarial_weight * adv + lambda_pixel * pixel, adv, pixel


def joint_objective(model: AEGAN, x, z, config: TrainConfig) -> dict[str, Tensor]:
    """Reconstruction + embedding-generator + denoiser losses from one shared forward pass."""
    x = Tensor(x) if not isinstance(x, Tensor) else x
    recon = model.F(model.H(x))
    fake_embedding = model.G_E(z)
    x_hat = model.F(fake_embedding)
    refined = model.phi(x_hat)
    l_ae = F.l1_loss(recon, x)
    l_e = generator_adversarial_loss(model.D_E, fake_embedding, config.saturating)
    adv = generator_adversarial_loss(model.D_R, refined, config.saturating)
    l_phi = config.adversarial_weight * adv + config.lambda_pixel * F.l1_loss(refined, x_hat)
    return {"ae": l_ae, "embedding": l_e, "denoiser": l_phi, "joint": l_ae + l_e + l_phi}


# -- Step 1 --------------------------------------------------------------------


def train_autoencoder(
    data: DatasetHandle,
    config: TrainConfig,
    model: AEGAN,
    state: TrainState | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> TrainState:
    """Minimize mean |F(H(x)) - x| over the dataset with Adam."""
    _require_data(data)
    if config.stage != "AE":
        raise ValueError(f"train_autoencoder needs an AE-stage config, got {config.stage}")
    if state is None:
        state = TrainState(stage="AE")
    if not state.optimizers:
        state.optimizers = make_optimizers(model, ("H", "F"), config.learning_rate)
    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        for batch in _batches(data, config, epoch):
            # per step, since epoch callbacks may evaluate in eval mode
            model.H.train()
            model.F.train()
            loss = ae_loss(model, batch)
            loss.backward()
            _step_all(state.optimizers, ("H", "F"))
            state.global_step += 1
            state.record("ae_l1", loss.item())
            _log_progress(state, config, ("ae_l1",))
            if _done(state, config):
                break
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(state)
        if _done(state, config):
            break
    return state


# -- Step 2 --------------------------------------------------------------------


def _check_frozen(expected: dict[str, str] | None, model: AEGAN) -> None:
    if not expected:
        return
    for name, digest in expected.items():
        if param_checksum(model.sub(name)) != digest:
            raise FrozenParameterError(f"frozen sub-network {name} changed during a stage that must not update it")


def gan_step(
    model: AEGAN,
    optimizers: dict[str, Adam],
    rng: np.random.Generator,
    config: TrainConfig,
    real_images: np.ndarray | None = None,
    real_embeddings: np.ndarray | None = None,
    frozen_checksums: dict[str, str] | None = None,
) -> dict[str, float]:
    """One critic update then one generator update in embedding space.

    Real embeddings are H(x) from the frozen encoder (eval mode); pass them
    precomputed via ``real_embeddings`` to skip the encoder forward.
    """
    if real_embeddings is None:
        if real_images is None:
            raise ValueError("gan_step needs real images or real embeddings")
        model.H.eval()
        with no_grad():
            real_embeddings = model.H(Tensor(real_images)).data
    real = Tensor(real_embeddings)
    model.G_E.train()
    model.D_E.train()
    z = noise(rng, len(real_embeddings), model.cfg.noise_dim)

    fake = model.G_E(z)
    d_loss = discriminator_loss(model.D_E, real, fake.detach())
    d_loss.backward()
    _step_all(optimizers, ("D_E",))

    with frozen(model.D_E):
        g_loss = generator_adversarial_loss(model.D_E, fake, config.saturating)
        g_loss.backward()
    _step_all(optimizers, ("G_E",))
    _check_frozen(frozen_checksums, model)
    return {"de_loss": d_loss.item(), "ge_loss": g_loss.item()}


def synthesize(model: AEGAN, z) -> np.ndarray:
    """x_hat = F(G_E(z)) with the generator pipeline frozen (eval mode, no graph)."""
    model.G_E.eval()
    model.F.eval()
    with no_grad():
        return model.F(model.G_E(z)).data


def denoiser_step(
    model: AEGAN,
    optimizers: dict[str, Adam],
    rng: np.random.Generator,
    config: TrainConfig,
    real_images: np.ndarray,
    frozen_checksums: dict[str, str] | None = None,
) -> dict[str, float]:
    """One D_R update then one phi update on synthetic images from the frozen generator."""
    z = noise(rng, len(real_images), model.cfg.noise_dim)
    x_hat = Tensor(synthesize(model, z))
    model.phi.train()
    model.D_R.train()

    refined = model.phi(x_hat)
    d_loss = discriminator_loss(model.D_R, Tensor(real_images), refined.detach())
    d_loss.backward()
    _step_all(optimizers, ("D_R",))

    with frozen(model.D_R):
        adv = generator_adversarial_loss(model.D_R, refined, config.saturating)
        pixel = F.l1_loss(refined, x_hat)
        total = config.adversarial_weight * adv + config.lambda_pixel * pixel
        total.backward()
    _step_all(optimizers, ("phi",))
    _check_frozen(frozen_checksums, model)
    return {"dr_loss": d_loss.item(), "phi_adv": adv.item(), "phi_pixel": pixel.item(), "phi_loss": total.item()}


def encode_dataset(model: AEGAN, data: DatasetHandle, batch_size: int = 64) -> np.ndarray:
    """H(x) for every image (eval mode)."""
    model.H.eval()
    out = np.empty((len(data), *model.cfg.embedding_shape), dtype=np.float32)
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = range(start, min(start + batch_size, len(data)))
            out[start : start + len(idx)] = model.H(Tensor(data.images(idx))).data
    return out


def train_gan(
    data: DatasetHandle,
    config: TrainConfig,
    model: AEGAN,
    state: TrainState | None = None,
    on_epoch_end: EpochCallback | None = None,
    train_denoiser: bool = True,
) -> TrainState:
    """Step 2: interleave :func:`gan_step` and :func:`denoiser_step` with H and F frozen.

    Every iteration makes one GAN update; the denoiser update runs on iterations
    whose global step is a multiple of ``config.denoiser_every``.
    """
    _require_data(data)
    if config.stage != "GAN":
        raise ValueError(f"train_gan needs a GAN-stage config, got {config.stage}")
    if state is None:
        state = TrainState(stage="GAN")
    groups = ("G_E", "D_E", "phi", "D_R")
    if not state.optimizers:
        state.optimizers = make_optimizers(model, groups, config.learning_rate, config.d_lr)
    frozen_ae = {"H": param_checksum(model.H), "F": param_checksum(model.F)}
    embeddings = encode_dataset(model, data)
    names = ("de_loss", "ge_loss") + (("dr_loss", "phi_loss") if train_denoiser else ())

    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        order = np.random.default_rng([config.seed, STAGE_SEED["GAN"], epoch]).permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            idx = order[start : start + config.batch_size]
            rng = _step_rng(config, state)
            rec = gan_step(model, state.optimizers, rng, config, real_embeddings=embeddings[idx])
            if train_denoiser and state.global_step % config.denoiser_every == 0:
                rec.update(denoiser_step(model, state.optimizers, rng, config, data.images(idx)))
            state.global_step += 1
            for k, v in rec.items():
                state.record(k, v)
            _log_progress(state, config, names)
            if _done(state, config):
                break
        _check_frozen(frozen_ae, model)
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(state)
        if _done(state, config):
            break
    return state


# -- Step 3 --------------------------------------------------------------------


def finetune_step(
    model: AEGAN, optimizers: dict[str, Adam], rng: np.random.Generator, config: TrainConfig, real_images: np.ndarray
) -> dict[str, float]:
    """Critics first, then one accumulated update of H, F, G_E and phi."""
    missing = [g for g in ("H", "F", "G_E", "D_E", "phi", "D_R") if g not in optimizers]
    if missing:
        raise ValueError(f"fine-tuning needs optimizers for every sub-network; missing {missing}")
    model.train()
    x = Tensor(real_images)
    z = noise(rng, len(real_images), model.cfg.noise_dim)

    embedding = model.H(x)
    recon = model.F(embedding)
    fake_embedding = model.G_E(z)
    # F's running statistics stay those of decoded real embeddings, which eval-mode sampling relies on
    with held_statistics(model.F):
        x_hat = model.F(fake_embedding)
    refined = model.phi(x_hat)

    de_loss = discriminator_loss(model.D_E, embedding.detach(), fake_embedding.detach())
    de_loss.backward()
    dr_loss = discriminator_loss(model.D_R, x, refined.detach())
    dr_loss.backward()
    _step_all(optimizers, ("D_E", "D_R"))

    with frozen(model.D_E, model.D_R):
        l_ae = F.l1_loss(recon, x)
        l_e = generator_adversarial_loss(model.D_E, fake_embedding, config.saturating)
        adv = generator_adversarial_loss(model.D_R, refined, config.saturating)
        l_phi = config.adversarial_weight * adv + config.lambda_pixel * F.l1_loss(refined, x_hat)
        for term in (l_ae, l_e, l_phi):
            term.backward()
    _step_all(optimizers, ("H", "F", "G_E", "phi"))
    joint = l_ae.item() + l_e.item() + l_phi.item()
    return {
        "de_loss": de_loss.item(),
        "dr_loss": dr_loss.item(),
        "ae_l1": l_ae.item(),
        "ge_loss": l_e.item(),
        "phi_loss": l_phi.item(),
        "joint": joint,
    }


def finetune_joint(
    data: DatasetHandle,
    config: TrainConfig,
    model: AEGAN,
    state: TrainState | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> TrainState:
    """Step 3: end-to-end fine-tuning of all six sub-networks."""
    _require_data(data)
    if config.stage != "FINETUNE":
        raise ValueError(f"finetune_joint needs a FINETUNE-stage config, got {config.stage}")
    if state is None:
        state = TrainState(stage="FINETUNE")
    if not state.optimizers:
        state.optimizers = make_optimizers(
            model, ("H", "F", "G_E", "D_E", "phi", "D_R"), config.learning_rate, config.d_lr
        )
    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        for batch in _batches(data, config, epoch):
            rec = finetune_step(model, state.optimizers, _step_rng(config, state), config, batch)
            state.global_step += 1
            for k, v in rec.items():
                state.record(k, v)
            _log_progress(state, config, ("joint", "ae_l1", "de_loss", "dr_loss"))
            if _done(state, config):
                break
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(state)
        if _done(state, config):
            break
    return state


def epoch_means(state: TrainState, name: str, steps_per_epoch: int) -> np.ndarray:
    values = np.asarray(state.series(name))
    n = len(values) // steps_per_epoch
    return values[: n * steps_per_epoch].reshape(n, steps_per_epoch).mean(axis=1)


# -- inference -------------------------------------------------------------------


def generate(model: AEGAN, z: np.ndarray, denoise: bool = True, batch_size: int = 64) -> np.ndarray:
    """phi(F(G_E(z))) (or F(G_E(z)) when ``denoise`` is False) in eval mode."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 2 or z.shape[1] != model.cfg.noise_dim:
        raise ValueError(f"expected noise of shape (N, {model.cfg.noise_dim}), got {z.shape}")
    model.eval()
    out = np.empty((len(z), *model.cfg.image_shape), dtype=np.float32)
    with no_grad():
        for start in range(0, len(z), batch_size):
            chunk = Tensor(z[start : start + batch_size])
            out[start : start + len(chunk)] = model.sample_from_noise(chunk, denoise=denoise).data
    return out


def sample_noise(model: AEGAN, count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    return noise(np.random.default_rng(seed), count, model.cfg.noise_dim)


def sample(model: AEGAN, count: int, seed: int, denoise: bool = True, batch_size: int = 64) -> np.ndarray:
    """``count`` images from independent prior draws; identical for identical seeds."""
    return generate(model, sample_noise(model, count, seed), denoise=denoise, batch_size=batch_size)


def iter_samples(model: AEGAN, count: int, seed: int, denoise: bool = True, batch_size: int = 64):
    """Like :func:`sample` but yields batches, for populations too large to hold at once."""
    z = sample_noise(model, count, seed)
    for start in range(0, count, batch_size):
        yield generate(model, z[start : start + batch_size], denoise=denoise, batch_size=batch_size)


def interpolation_path(z_a: np.ndarray, z_b: np.ndarray, steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError(f"interpolation needs at least 2 steps, got {steps}")
    z_a = np.asarray(z_a, dtype=np.float32).reshape(-1)
    z_b = np.asarray(z_b, dtype=np.float32).reshape(-1)
    if z_a.shape != z_b.shape:
        raise ValueError(f"endpoint shapes differ: {z_a.shape} vs {z_b.shape}")
    t = np.linspace(0.0, 1.0, steps, dtype=np.float32)[:, None]
    # this form is exact when z_a == z_b; the last frame is pinned to z_b
    path = z_a + t * (z_b - z_a)
    path[-1] = z_b
    return path


def interpolate(model: AEGAN, z_a, z_b, steps: int = 10, denoise: bool = True) -> np.ndarray:
    """Images along the straight line z(t) = (1 - t) z_a + t z_b, t in [0, 1], endpoints included."""
    path = interpolation_path(z_a, z_b, steps)
    if path.shape[1] != model.cfg.noise_dim:
        raise ValueError(f"noise dimension {path.shape[1]} != {model.cfg.noise_dim}")
    # one frame per forward so endpoints match single-sample generation bitwise
    return generate(model, path, denoise=denoise, batch_size=1)


def reconstruction_l1(model: AEGAN, data: DatasetHandle, batch_size: int = 64) -> float:
    """Mean |F(H(x)) - x| over ``data`` in eval mode."""
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            x = data.images(range(start, min(start + batch_size, len(data))))
            recon = model.reconstruct(Tensor(x)).data
            total += float(np.abs(recon - x).sum(dtype=np.float64))
            count += x.size
    return total / count


def reconstruct(model: AEGAN, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = np.empty_like(images, dtype=np.float32)
    with no_grad():
        for start in range(0, len(images), batch_size):
            out[start : start + batch_size] = model.reconstruct(Tensor(images[start : start + batch_size])).data
    return out


def embedding_prior(model: AEGAN, data: DatasetHandle, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise mean and std of H(x) over ``data``."""
    emb = encode_dataset(model, data, batch_size).astype(np.float64)
    return emb.mean(axis=0), emb.std(axis=0)


def decode_samples(
    model: AEGAN, data: DatasetHandle, count: int, seed: int, source: str = "prior", batch_size: int = 64
) -> np.ndarray:
    """Decoder outputs for ablations that train no embedding generator.

    ``source="prior"`` decodes draws from an element-wise Gaussian fitted to the
    dataset's embeddings; ``source="reconstruction"`` decodes H(x) of the first
    ``count`` images.
    """
    if source == "reconstruction":
        return reconstruct(model, data.images(range(min(count, len(data)))), batch_size)
    if source != "prior":
        raise ValueError(f"unknown source {source!r}")
    mean, std = embedding_prior(model, data, batch_size)
    rng = np.random.default_rng(seed)
    emb = (mean + std * rng.standard_normal((count, *mean.shape))).astype(np.float32)
    model.eval()
    out = np.empty((count, *model.cfg.image_shape), dtype=np.float32)
    with no_grad():
        for start in range(0, count, batch_size):
            out[start : start + batch_size] = model.F(Tensor(emb[start : start + batch_size])).data
    return out
