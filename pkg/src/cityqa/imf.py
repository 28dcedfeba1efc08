"""Incomplete multimodal fusion: zero-pad missing modalities, encode, fuse.

The fusion path pads whichever modality is absent with a zero vector, runs
dedicated encoders, concatenates the encoded features (image slot first,
always), and parameterizes a diagonal Gaussian over the latent via two heads:
one for the mean, one that outputs log(sigma) directly. Training samples the
latent with the reparameterization z = mu + eps * sigma; inference uses the
mean. The KL term against a standard normal prior is available in closed
form together with its analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import Mlp, NumericError, ShapeError, check_finite


class EmptyBundleError(ValueError):
    """Both modalities absent; there is nothing to fuse."""


@dataclass
class ModalityBundle:
    """Optional image-feature and point-feature vectors with presence flags."""

    image_features: Optional[np.ndarray] = None
    point_features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.image_features is not None:
            self.image_features = np.asarray(self.image_features, dtype=np.float64).ravel()
        if self.point_features is not None:
            self.point_features = np.asarray(self.point_features, dtype=np.float64).ravel()
        if self.image_features is None and self.point_features is None:
            raise EmptyBundleError("bundle must carry at least one modality")

    @property
    def image_present(self) -> bool:
        return self.image_features is not None

    @property
    def point_present(self) -> bool:
        return self.point_features is not None


@dataclass
class EncodedFeatures:
    """Per-modality encodings and their fixed-order concatenation."""

    r_image: np.ndarray
    r_point: np.ndarray
    r_z: np.ndarray


@dataclass
class GaussianEmbedding:
    """Diagonal Gaussian over the latent: mean and log standard deviation."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64).ravel()
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError(
                f"mu has length {self.mu.size}, log_sigma has {self.log_sigma.size}"
            )


@dataclass
class FusedEmbedding:
    """Latent vector actually fed downstream, plus its KL regularizer value."""

    z: np.ndarray
    mode: str  # "train_sampled" | "infer_mean"
    kl: float


@dataclass
class ImfParams:
    """The four learnable pieces of the fusion module."""

    encoder_image: Mlp
    encoder_point: Mlp
    head_mu: Mlp
    head_log_sigma: Mlp

    @property
    def image_dim(self) -> int:
        return self.encoder_image.input_dim

    @property
    def point_dim(self) -> int:
        return self.encoder_point.input_dim

    @property
    def latent_dim(self) -> int:
        return self.head_mu.output_dim

    def parameters(self):
        return (
            self.encoder_image.parameters()
            + self.encoder_point.parameters()
            + self.head_mu.parameters()
            + self.head_log_sigma.parameters()
        )


def pad_missing(
    bundle: ModalityBundle, image_dim: int, point_dim: int
) -> tuple[np.ndarray, np.ndarray]:
    """Replace absent modalities with zero vectors of the declared lengths."""
    if bundle.image_present:
        x_image = bundle.image_features
        if x_image.size != image_dim:
            raise ShapeError(
                f"image features have length {x_image.size}, declared {image_dim}"
            )
    else:
        x_image = np.zeros(image_dim)
    if bundle.point_present:
        x_point = bundle.point_features
        if x_point.size != point_dim:
            raise ShapeError(
                f"point features have length {x_point.size}, declared {point_dim}"
            )
    else:
        x_point = np.zeros(point_dim)
    return x_image, x_point


def encode(
    padded: tuple[np.ndarray, np.ndarray], encoder_image: Mlp, encoder_point: Mlp
) -> EncodedFeatures:
    """Run the dedicated encoders and concatenate image-then-point."""
    x_image, x_point = padded
    r_image, _ = encoder_image.forward(x_image)
    r_point, _ = encoder_point.forward(x_point)
    r_image = r_image.ravel()
    r_point = r_point.ravel()
    return EncodedFeatures(
        r_image=r_image,
        r_point=r_point,
        r_z=np.concatenate([r_image, r_point]),
    )


def gaussian_head(r_z: np.ndarray, head_mu: Mlp, head_log_sigma: Mlp) -> GaussianEmbedding:
    """Estimate mu and log(sigma) from the concatenated features."""
    r_z = np.asarray(r_z, dtype=np.float64).ravel()
    mu, _ = head_mu.forward(r_z)
    log_sigma, _ = head_log_sigma.forward(r_z)
    if mu.size != log_sigma.size:
        raise ShapeError(
            f"heads disagree on latent dim: {mu.size} vs {log_sigma.size}"
        )
    return GaussianEmbedding(mu=mu.ravel(), log_sigma=log_sigma.ravel())


def sample_z(g: GaussianEmbedding, eps: np.ndarray) -> np.ndarray:
    """Reparameterized sample z = mu + eps * sigma (elementwise)."""
    eps = np.asarray(eps, dtype=np.float64).ravel()
    if eps.size != g.mu.size:
        raise ShapeError(f"eps has length {eps.size}, latent dim is {g.mu.size}")
    return g.mu + eps * np.exp(g.log_sigma)


def kl_loss(g: GaussianEmbedding) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) for a diagonal Gaussian.

    Closed form, summed over dimensions:
        -1/2 * sum(1 + log(sigma^2) - mu^2 - sigma^2)
    Nonnegative, zero exactly at mu=0, log_sigma=0.
    """
    if not (np.isfinite(g.mu).all() and np.isfinite(g.log_sigma).all()):
        raise NumericError("non-finite entries in Gaussian embedding")
    sigma_sq = np.exp(2.0 * g.log_sigma)
    return float(-0.5 * np.sum(1.0 + 2.0 * g.log_sigma - g.mu**2 - sigma_sq))


def kl_grad(g: GaussianEmbedding) -> tuple[np.ndarray, np.ndarray]:
    """Analytic partials of kl_loss: d/dmu = mu, d/dlog_sigma = sigma^2 - 1."""
    return g.mu.copy(), np.exp(2.0 * g.log_sigma) - 1.0


@dataclass
class FuseTrace:
    """Cached activations of one fusion pass, enough to backpropagate."""

    tape_image: list
    tape_point: list
    tape_mu: list
    tape_sigma: list
    encoded: EncodedFeatures
    gaussian: GaussianEmbedding
    eps: Optional[np.ndarray]


def fuse_traced(
    bundle: ModalityBundle, params: ImfParams, eps: Optional[np.ndarray]
) -> tuple[FusedEmbedding, FuseTrace]:
    """Full fusion pass keeping tapes. eps=None takes the mean path."""
    x_image, x_point = pad_missing(bundle, params.image_dim, params.point_dim)
    r_image, tape_image = params.encoder_image.forward(x_image)
    r_point, tape_point = params.encoder_point.forward(x_point)
    encoded = EncodedFeatures(
        r_image=r_image.ravel(),
        r_point=r_point.ravel(),
        r_z=np.concatenate([r_image.ravel(), r_point.ravel()]),
    )
    mu, tape_mu = params.head_mu.forward(encoded.r_z)
    log_sigma, tape_sigma = params.head_log_sigma.forward(encoded.r_z)
    gaussian = GaussianEmbedding(mu=mu.ravel(), log_sigma=log_sigma.ravel())
    if eps is None:
        z = gaussian.mu.copy()
        mode = "infer_mean"
    else:
        z = sample_z(gaussian, eps)
        mode = "train_sampled"
    fused = FusedEmbedding(z=z, mode=mode, kl=kl_loss(gaussian))
    trace = FuseTrace(
        tape_image=tape_image,
        tape_point=tape_point,
        tape_mu=tape_mu,
        tape_sigma=tape_sigma,
        encoded=encoded,
        gaussian=gaussian,
        eps=None if eps is None else np.asarray(eps, dtype=np.float64).ravel(),
    )
    return fused, trace


def fuse_backward(
    params: ImfParams, trace: FuseTrace, dz: np.ndarray, kl_weight: float = 0.0
) -> None:
    """Accumulate gradients of (loss_through_z + kl_weight * kl) into params.

    `dz` is the upstream gradient w.r.t. the fused latent. With the sampled
    path, z = mu + eps * exp(log_sigma), so dz flows to the mean head as-is
    and to the log-sigma head scaled by eps * sigma; the KL term adds mu to
    d/dmu and sigma^2 - 1 to d/dlog_sigma.
    """
    dz = np.asarray(dz, dtype=np.float64).ravel()
    g = trace.gaussian
    if dz.size != g.mu.size:
        raise ShapeError(f"dz has length {dz.size}, latent dim is {g.mu.size}")
    dmu = dz.copy()
    if trace.eps is not None:
        dlog_sigma = dz * trace.eps * np.exp(g.log_sigma)
    else:
        dlog_sigma = np.zeros_like(g.log_sigma)
    if kl_weight:
        kmu, klog = kl_grad(g)
        dmu += kl_weight * kmu
        dlog_sigma += kl_weight * klog
    dr_z = params.head_mu.backward(trace.tape_mu, dmu.reshape(1, -1))
    dr_z = dr_z + params.head_log_sigma.backward(trace.tape_sigma, dlog_sigma.reshape(1, -1))
    e_i = trace.encoded.r_image.size
    params.encoder_image.backward(trace.tape_image, dr_z[:, :e_i])
    params.encoder_point.backward(trace.tape_point, dr_z[:, e_i:])


def fuse(
    bundle: ModalityBundle,
    params: ImfParams,
    mode: str = "infer",
    rng: Optional[np.random.Generator] = None,
) -> FusedEmbedding:
    """Pad, encode, parameterize, and draw (train) or take the mean (infer).

    Train mode draws eps from `rng`, one standard-normal value per latent
    dimension. Infer mode never touches `rng`.
    """
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng to draw eps")
        eps = rng.standard_normal(params.latent_dim)
    elif mode == "infer":
        eps = None
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    fused, _ = fuse_traced(bundle, params, eps)
    check_finite(fused.z, "fused embedding")
    return fused
