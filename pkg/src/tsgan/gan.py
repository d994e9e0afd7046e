"""LSTM generator / discriminator pair and the adversarial training loop."""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import corenn as nn
from .corenn import LstmLayerSpec, ParamSet, Tape

CHECKPOINT_MAGIC = b"TSGC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class GanConfig:
    s_w: int = 60
    latent_dim: int = 1
    generator_hidden: tuple = (32, 64, 128)
    discriminator_hidden: int = 100
    batch_size: int = 32
    epochs: int = 20
    lr_g: float = 0.01
    lr_d: float = 0.01
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0

    def __post_init__(self):
        self.generator_hidden = tuple(int(h) for h in self.generator_hidden)
        positive = dict(s_w=self.s_w, latent_dim=self.latent_dim,
                        discriminator_hidden=self.discriminator_hidden,
                        batch_size=self.batch_size)
        for name, value in positive.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if not self.generator_hidden or min(self.generator_hidden) < 1:
            raise ValueError(f"generator_hidden must be non-empty positive widths, got {self.generator_hidden}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator_hidden"] = list(self.generator_hidden)
        return d


@dataclass
class NoisePrior:
    """Standard normal latent sequences of shape (s_w, latent_dim)."""

    s_w: int
    latent_dim: int = 1

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if m < 1:
            raise ValueError("need at least one noise sample")
        return rng.standard_normal((m, self.s_w, self.latent_dim))


def sample_noise(prior: NoisePrior, m: int, rng: np.random.Generator) -> np.ndarray:
    return prior.sample(m, rng)


@dataclass
class GanModel:
    generator: ParamSet
    discriminator: ParamSet
    config: GanConfig

    @property
    def generator_specs(self) -> list[LstmLayerSpec]:
        sizes = (self.config.latent_dim,) + self.config.generator_hidden
        return [LstmLayerSpec(a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def discriminator_spec(self) -> LstmLayerSpec:
        return LstmLayerSpec(1, self.config.discriminator_hidden)

    @property
    def prior(self) -> NoisePrior:
        return NoisePrior(self.config.s_w, self.config.latent_dim)

    # --- tape-level graph builders ---

    def generate_on(self, tape: Tape, z: nn.Var, trainable: bool = False) -> nn.Var:
        """G(z): stacked LSTMs then a per-timestep dense(->1) + tanh head. Returns (B, T)."""
        h = z
        for k, spec in enumerate(self.generator_specs):
            h = nn.lstm_layer(spec, *self._params(tape, self.generator, f"lstm{k}", trainable), h)
        w = tape.param(self.generator, "head.w", trainable)
        b = tape.param(self.generator, "head.b", trainable)
        out = nn.tanh(nn.dense_layer(w, b, h))
        return nn.reshape(out, np.shape(out.value)[:-1])

    def discriminate_on(self, tape: Tape, x: nn.Var, trainable: bool = False):
        """D(x) for windows (B, T). Returns (probabilities (B,), features (B, T, H))."""
        xv = x if isinstance(x, nn.Var) else tape.constant(x)
        seq = nn.reshape(xv, np.shape(xv.value) + (1,))
        feats = nn.lstm_layer(self.discriminator_spec,
                              *self._params(tape, self.discriminator, "lstm", trainable), seq)
        w = tape.param(self.discriminator, "head.w", trainable)
        b = tape.param(self.discriminator, "head.b", trainable)
        logits = nn.dense_layer(w, b, feats)
        logit = nn.mean(nn.reshape(logits, np.shape(logits.value)[:-1]), axis=-1)
        return nn.sigmoid(logit), feats

    @staticmethod
    def _params(tape, params, prefix, trainable):
        return tuple(tape.param(params, f"{prefix}.{n}", trainable) for n in ("w_ih", "w_hh", "b"))

    # --- array conveniences ---

    def generate(self, z) -> np.ndarray:
        tape = Tape()
        return self.generate_on(tape, tape.constant(z)).value

    def discriminate(self, x) -> np.ndarray:
        tape = Tape()
        return self.discriminate_on(tape, tape.constant(x))[0].value

    def features(self, x) -> np.ndarray:
        tape = Tape()
        return self.discriminate_on(tape, tape.constant(x))[1].value

    def to_bytes(self) -> bytes:
        return save_checkpoint_bytes(self)


def init_gan(config: GanConfig) -> GanModel:
    rng = np.random.default_rng([config.seed, 0])
    gen = ParamSet()
    sizes = (config.latent_dim,) + config.generator_hidden
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        nn.init_lstm(gen, f"lstm{k}", LstmLayerSpec(a, b), rng)
    nn.init_dense(gen, "head", config.generator_hidden[-1], 1, rng)
    disc = ParamSet()
    nn.init_lstm(disc, "lstm", LstmLayerSpec(1, config.discriminator_hidden), rng)
    nn.init_dense(disc, "head", config.discriminator_hidden, 1, rng)
    return GanModel(gen, disc, config)


def discriminator_step(model: GanModel, real_batch, fake_batch, optimizer=None) -> tuple[float, float, float]:
    """One SGD update of the discriminator only.

    Returns ``(loss, loss_real, loss_fake)`` measured before the update, where
    ``loss`` is BCE over the concatenated batch (targets 1 real, 0 fake).
    """
    real = nn.as_tensor(real_batch)
    fake = nn.as_tensor(fake_batch)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("discriminator step needs non-empty batches")
    if real.shape != fake.shape:
        raise ValueError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    tape = Tape()
    both = tape.constant(np.concatenate((real, fake), axis=0))
    prob, _ = model.discriminate_on(tape, both, trainable=True)
    targets = np.concatenate((np.ones(len(real)), np.zeros(len(fake))))
    loss = nn.bce_loss(prob, targets)
    model.discriminator.zero_grad()
    nn.backward(tape, loss)
    if optimizer is None:
        nn.sgd_step(model.discriminator, model.config.lr_d)
    else:
        optimizer.step(model.discriminator)
    p = prob.value
    return (float(loss.value), nn.bce_value(p[:len(real)], 1.0), nn.bce_value(p[len(real):], 0.0))


def generator_step(model: GanModel, noise_batch, optimizer=None) -> float:
    """One SGD update of the generator only, non-saturating loss BCE(D(G(z)), 1)."""
    z = nn.as_tensor(noise_batch)
    if len(z) == 0:
        raise ValueError("generator step needs a non-empty noise batch")
    tape = Tape()
    fake = model.generate_on(tape, tape.constant(z), trainable=True)
    prob, _ = model.discriminate_on(tape, fake, trainable=False)
    loss = nn.bce_loss(prob, np.ones(len(z)))
    model.generator.zero_grad()
    nn.backward(tape, loss)
    if optimizer is None:
        nn.sgd_step(model.generator, model.config.lr_g)
    else:
        optimizer.step(model.generator)
    return float(loss.value)


@dataclass
class EpochStats:
    epoch: int
    d_loss_real: float
    d_loss_fake: float
    g_loss: float
    seconds: float


@dataclass
class TrainStats:
    epochs: list[EpochStats] = field(default_factory=list)

    def losses(self) -> list[tuple[float, float, float]]:
        return [(e.d_loss_real, e.d_loss_fake, e.g_loss) for e in self.epochs]

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "d_loss_real", "d_loss_fake", "g_loss", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.d_loss_real), repr(e.d_loss_fake),
                            repr(e.g_loss), f"{e.seconds:.3f}"])


def adversarial_train(windows, config: GanConfig, model: Optional[GanModel] = None,
                      callback=None) -> tuple[GanModel, TrainStats]:
    """Alternate one discriminator and one generator SGD step per minibatch.

    ``windows`` is a WindowSet or an array ``(N, s_w)`` of values in [-1, 1].
    Each epoch shuffles the windows and visits every one exactly once; the
    last partial batch is kept.  ``callback(epoch, model)`` runs after each
    epoch if given.
    """
    X = _window_array(windows)
    if X.size == 0 or len(X) == 0:
        raise ValueError("adversarial_train needs at least one window")
    if X.shape[1] != config.s_w:
        raise ValueError(f"window length {X.shape[1]} != config s_w {config.s_w}")
    if np.abs(X).max() > 1.0 + 1e-12:
        raise ValueError("training windows must be normalised to [-1, 1]")
    model = model or init_gan(config)
    rng = np.random.default_rng([config.seed, 1])
    prior = model.prior
    stats = TrainStats()
    m = config.batch_size
    opt_d = nn.make_optimizer(config.optimizer, config.lr_d, config.momentum)
    opt_g = nn.make_optimizer(config.optimizer, config.lr_g, config.momentum)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(X))
        sums = np.zeros(3)
        n_batches = 0
        for batch_no, start in enumerate(range(0, len(X), m)):
            real = X[order[start:start + m]]
            z1 = prior.sample(len(real), rng)
            fake = model.generate(z1)
            _, l_real, l_fake = discriminator_step(model, real, fake, opt_d)
            z2 = prior.sample(len(real), rng)
            l_g = generator_step(model, z2, opt_g)
            if not all(math.isfinite(v) for v in (l_real, l_fake, l_g)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            sums += (l_real, l_fake, l_g)
            n_batches += 1
        means = sums / n_batches
        stats.epochs.append(EpochStats(epoch, float(means[0]), float(means[1]), float(means[2]),
                                       time.perf_counter() - t0))
        if callback is not None:
            callback(epoch, model)
    return model, stats


def _window_array(windows) -> np.ndarray:
    if hasattr(windows, "values_array"):
        return windows.values_array()
    return np.atleast_2d(nn.as_tensor(windows))


# --- checkpoint ---------------------------------------------------------------

def save_checkpoint_bytes(model: GanModel) -> bytes:
    header = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    gen = model.generator.to_bytes()
    disc = model.discriminator.to_bytes()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, blob in ((b"config", header), (b"generator", gen), (b"discriminator", disc)):
        parts += [struct.pack("<Q", len(name)), name, struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def load_checkpoint_bytes(blob: bytes) -> GanModel:
    try:
        return _read_checkpoint(blob)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise nn.ConfigurationError(f"truncated or corrupt checkpoint: {exc}") from None


def _read_checkpoint(blob: bytes) -> GanModel:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise nn.ConfigurationError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise nn.ConfigurationError(f"unsupported checkpoint version {version}")
    pos = 8
    sections = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<Q", blob, pos)
        name = blob[pos + 8:pos + 8 + n].decode("ascii")
        pos += 8 + n
        (size,) = struct.unpack_from("<Q", blob, pos)
        if pos + 8 + size > len(blob):
            raise nn.ConfigurationError(f"checkpoint section {name!r} is truncated")
        sections[name] = blob[pos + 8:pos + 8 + size]
        pos += 8 + size
    missing = {"config", "generator", "discriminator"} - sections.keys()
    if missing:
        raise nn.ConfigurationError(f"checkpoint lacks sections {sorted(missing)}")
    config = GanConfig(**json.loads(sections["config"]))
    return GanModel(ParamSet.from_bytes(sections["generator"]),
                    ParamSet.from_bytes(sections["discriminator"]), config)


def save_checkpoint(model: GanModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint_bytes(model))


def load_checkpoint(path) -> GanModel:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
