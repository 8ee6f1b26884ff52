"""Conditional VAE over environment samples with (channel, time) labels.

Observed per-node channel embeddings act as samples from the latent
environment distribution.  Each sample is tagged with a one-hot multi-label of
length K*T (flat index ``k * T + t``).  Three fully connected networks share
the label conditioning: a recognition encoder mapping (sample, label) to a
diagonal-Gaussian posterior, a conditional prior mapping the label alone to a
diagonal Gaussian, and a decoder mapping (latent, label) back to sample space.
Training minimizes the analytic posterior/prior KL plus a unit-variance
Gaussian reconstruction term (mean squared error), one reparameterized draw
per sample.

New environment samples are instantiated by drawing a latent from the prior
of any label and decoding it; generation never records gradients, so a sample
library is plain data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng, derive
from .tensor import Tensor, concat, matmul, no_grad, reduce, take


def build_multilabel(k: int, t: int, channels: int, snapshots: int) -> np.ndarray:
    """One-hot vector of length channels * snapshots, hot at k * snapshots + t."""
    if not (0 <= k < channels and 0 <= t < snapshots):
        raise ValueError(f"label ({k}, {t}) outside ({channels}, {snapshots})")
    y = np.zeros(channels * snapshots, dtype=np.float64)
    y[k * snapshots + t] = 1.0
    return y


def multilabel_batch(ks: np.ndarray, ts: np.ndarray, channels: int, snapshots: int) -> np.ndarray:
    ks = np.asarray(ks, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    if ks.size and not ((0 <= ks).all() and (ks < channels).all()
                        and (0 <= ts).all() and (ts < snapshots).all()):
        raise ValueError("label indices out of range")
    out = np.zeros((ks.size, channels * snapshots), dtype=np.float64)
    out[np.arange(ks.size), ks * snapshots + ts] = 1.0
    return out


def multilabel_to_indices(y: np.ndarray, snapshots: int) -> tuple[int, int]:
    """Invert a one-hot multi-label: flat // T is the channel, flat % T the time."""
    flat = int(np.argmax(y))
    return flat // snapshots, flat % snapshots


class _Mlp:
    """Fully connected trunk with LeakyReLU hidden activations."""

    def __init__(self, dims: list[int], rng: Rng, linear_out: bool = True):
        self.weights = []
        self.biases = []
        self.linear_out = linear_out
        for i in range(len(dims) - 1):
            scale = 1.0 / np.sqrt(dims[i])
            w = rng.spawn("w", i).uniform((dims[i], dims[i + 1])) * 2 * scale - scale
            b = rng.spawn("b", i).uniform((1, dims[i + 1])) * 2 * scale - scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return list(self.weights) + list(self.biases)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = matmul(h, w) + b
            if i < last or not self.linear_out:
                h = h.leaky_relu()
        return h


class CondVae:
    """Encoder / conditional prior / decoder, all label-conditioned."""

    def __init__(self, sample_dim: int, channels: int, snapshots: int,
                 latent_dim: int = 16, hidden_dim: int = 64, seed: int = 0):
        self.sample_dim = sample_dim
        self.channels = channels
        self.snapshots = snapshots
        self.latent_dim = latent_dim
        label_dim = channels * snapshots
        rng = Rng(derive(seed, "cvae-init"))
        self.encoder_trunk = _Mlp([sample_dim + label_dim, hidden_dim, hidden_dim], rng.spawn("enc"), linear_out=False)
        self.encoder_mu = _Mlp([hidden_dim, latent_dim], rng.spawn("enc-mu"))
        self.encoder_logvar = _Mlp([hidden_dim, latent_dim], rng.spawn("enc-logvar"))
        self.prior_trunk = _Mlp([label_dim, hidden_dim, hidden_dim], rng.spawn("prior"), linear_out=False)
        self.prior_mu = _Mlp([hidden_dim, latent_dim], rng.spawn("prior-mu"))
        self.prior_logvar = _Mlp([hidden_dim, latent_dim], rng.spawn("prior-logvar"))
        self.decoder = _Mlp([latent_dim + label_dim, hidden_dim, hidden_dim, sample_dim], rng.spawn("dec"))

    def parameters(self) -> list[Tensor]:
        nets = [self.encoder_trunk, self.encoder_mu, self.encoder_logvar,
                self.prior_trunk, self.prior_mu, self.prior_logvar, self.decoder]
        return [p for net in nets for p in net.parameters()]

    def encode(self, z: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior parameters of the latent given a sample and its label."""
        if z.shape[1] != self.sample_dim or y.shape[1] != self.channels * self.snapshots:
            raise ValueError(
                f"encode expects ({self.sample_dim}, {self.channels * self.snapshots})-dim "
                f"inputs, got ({z.shape[1]}, {y.shape[1]})"
            )
        h = self.encoder_trunk(concat([z, y], axis=1))
        return self.encoder_mu(h), self.encoder_logvar(h)

    def prior(self, y: Tensor) -> tuple[Tensor, Tensor]:
        h = self.prior_trunk(y)
        return self.prior_mu(h), self.prior_logvar(h)

    def decode(self, e: Tensor, y: Tensor) -> Tensor:
        return self.decoder(concat([e, y], axis=1))


def reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    """mu + exp(logvar / 2) * eps with externally supplied noise."""
    return mu + (logvar * 0.5).exp() * Tensor(eps)


def gaussian_kl(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """Per-sample KL(q || p) between diagonal Gaussians, summed over dims."""
    ratio = (logvar_q - logvar_p).exp()
    sq = (mu_q - mu_p).square() * (-logvar_p).exp()
    inner = (logvar_p - logvar_q) + ratio + sq + (-1.0)
    return reduce("sum", inner * 0.5, axis=1)


def cvae_loss(model: CondVae, z: np.ndarray, y: np.ndarray, eps: np.ndarray) -> Tensor:
    """Batch-mean KL plus mean squared reconstruction error (one draw each).

    The sample inputs are treated as constants: gradient flows into the VAE
    networks only, never back into whatever produced the samples.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("cvae_loss needs a nonempty batch")
    zt, yt = Tensor(z), Tensor(y)
    mu_q, logvar_q = model.encode(zt, yt)
    mu_p, logvar_p = model.prior(yt)
    kl = reduce("mean", gaussian_kl(mu_q, logvar_q, mu_p, logvar_p))
    e = reparameterize(mu_q, logvar_q, eps)
    recon = reduce("mean", (model.decode(e, yt) - zt).square())
    return kl + recon


def reconstruction_mse(model: CondVae, z: np.ndarray, y: np.ndarray) -> float:
    """Deterministic reconstruction error through the posterior mean."""
    with no_grad():
        mu_q, logvar_q = model.encode(Tensor(z), Tensor(y))
        out = model.decode(mu_q, Tensor(y))
    return float(((out.data - z) ** 2).mean())


# --------------------------------------------------------------------------
# sample libraries


@dataclass
class SampleLibrary:
    """Observed and generated environment samples with (k, t) labels."""

    observed: np.ndarray            # (M, d')
    observed_labels: np.ndarray     # (M, 2) int64 rows (k, t)
    generated: np.ndarray           # (G, d')
    generated_labels: np.ndarray    # (G, 2)

    @property
    def total(self) -> int:
        return len(self.observed) + len(self.generated)


def observed_samples(rep) -> tuple[np.ndarray, np.ndarray]:
    """Flatten a representation into (N*K*T, d') samples plus (k, t) labels.

    Order is node-major, then channel, then time.  The arrays are detached
    copies; the library never participates in gradient flow.
    """
    z = rep.z.data  # (N, T, K, d')
    n, t_len, k_ch, dim = z.shape
    samples = np.ascontiguousarray(z.transpose(0, 2, 1, 3)).reshape(n * k_ch * t_len, dim).copy()
    ks = np.tile(np.repeat(np.arange(k_ch), t_len), n)
    ts = np.tile(np.arange(t_len), n * k_ch)
    return samples, np.stack([ks, ts], axis=1).astype(np.int64)


def generate_samples(model: CondVae, count: int, seed: int,
                     max_time: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Instantiate new samples from the conditional prior, label-uniform.

    Labels (k, t) are drawn uniformly (t below ``max_time`` when given, so
    training never conditions on unobserved snapshots), a latent is drawn
    from the prior of each label, and the decoder maps it to sample space.
    Runs without gradient recording and is deterministic per seed.
    """
    if count <= 0:
        raise ValueError(f"generation count must be positive, got {count}")
    rng = Rng(derive(seed, "cvae-generate"))
    t_bound = model.snapshots if max_time is None else min(max_time, model.snapshots)
    ks = rng.integers(model.channels, count)
    ts = rng.integers(t_bound, count)
    y = multilabel_batch(ks, ts, model.channels, model.snapshots)
    eps = rng.normal((count, model.latent_dim))
    with no_grad():
        mu_p, logvar_p = model.prior(Tensor(y))
        e = reparameterize(mu_p, logvar_p, eps)
        out = model.decode(e, Tensor(y))
    return out.data.copy(), np.stack([ks, ts], axis=1).astype(np.int64)


def draw_intervention_values(library: SampleLibrary, count: int, mixing_ratio: float,
                             rng: Rng) -> np.ndarray:
    """Draw replacement vectors, observed with probability mixing_ratio.

    Falls back to whichever side is nonempty when the other has no samples.
    """
    if library.total == 0:
        raise ValueError("sample library is empty")
    dim = library.observed.shape[1] if len(library.observed) else library.generated.shape[1]
    use_observed = rng.uniform(count) < mixing_ratio
    if len(library.observed) == 0:
        use_observed[:] = False
    if len(library.generated) == 0:
        use_observed[:] = True
    out = np.empty((count, dim), dtype=np.float64)
    idx_obs = rng.integers(max(len(library.observed), 1), count)
    idx_gen = rng.integers(max(len(library.generated), 1), count)
    if use_observed.any():
        out[use_observed] = library.observed[idx_obs[use_observed]]
    if (~use_observed).any():
        out[~use_observed] = library.generated[idx_gen[~use_observed]]
    return out
