"""MLP building blocks: encoder, decoder, and the two discriminators.

Parameters live in plain dicts of named tensors ("w0", "b0", ...), which
keeps the optimizer generic and the checkpoint layout flat. A model is a
spec (widths, activation, dropout rate) plus such a dict; the bundle
groups the four networks the adversarial objectives need.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import BernoulliVec, DiagonalGaussian
from .errors import ContractError, ShapeError
from .rng import RngStream

ACTIVATIONS = ("tanh", "softgate", "leaky")
LEAKY_SLOPE = 0.2
LIKELIHOODS = ("gaussian", "bernoulli")


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected stack: widths[0] in, widths[-1] out, >=1 hidden."""

    widths: tuple[int, ...]
    activation: str = "tanh"
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if len(self.widths) < 3:
            raise ContractError(f"need at least one hidden layer, widths {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ContractError(f"layer widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation '{self.activation}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


@dataclass
class Mlp:
    spec: MlpSpec
    params: dict[str, Tensor] = field(default_factory=dict)


def xavier_init(fan_in: int, fan_out: int, stream: RngStream) -> np.ndarray:
    """Xavier-uniform weight matrix: U(-limit, limit), limit = sqrt(6/(in+out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * stream.uniform((fan_in, fan_out)) - 1.0) * limit


def build_mlp(spec: MlpSpec, stream: RngStream) -> Mlp:
    """Fresh MLP with Xavier-uniform weights and zero biases."""
    params: dict[str, Tensor] = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params[f"w{i}"] = Tensor(xavier_init(fan_in, fan_out, stream), requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return Mlp(spec=spec, params=params)


def _activate(h: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return ad.tanh(h)
    if kind == "softgate":
        return ad.tanh(h) * ad.sigmoid(h)
    return ad.leaky_relu(h, LEAKY_SLOPE)


def apply_dropout(h: Tensor, rate: float, stream: RngStream | None, training: bool) -> Tensor:
    """Inverted dropout: keep with prob 1-rate, scale kept units by 1/(1-rate).

    Identity when not training or rate is zero, so evaluation never
    consumes stream draws.
    """
    if not training or rate == 0.0:
        return h
    if stream is None:
        raise ContractError("dropout in training mode needs a stream")
    mask = (stream.uniform(h.shape) >= rate) / (1.0 - rate)
    return h * Tensor(mask)


def mlp_forward(
    mlp: Mlp,
    x: Tensor,
    stream: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    """Run the stack; dropout applies to hidden activations only."""
    spec = mlp.spec
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ShapeError(f"input shape {x.shape} does not match in-width {spec.widths[0]}")
    h = x
    for i in range(spec.n_layers):
        h = ad.add_bias(ad.matmul(h, mlp.params[f"w{i}"]), mlp.params[f"b{i}"])
        if i < spec.n_layers - 1:
            h = _activate(h, spec.activation)
            h = apply_dropout(h, spec.dropout, stream, training)
    return h


def detach_mlp(mlp: Mlp) -> Mlp:
    """Same weights as constants: gradients stop at (not through) them."""
    return Mlp(spec=mlp.spec, params={k: t.detach() for k, t in mlp.params.items()})


@dataclass
class ModelBundle:
    """Encoder, decoder, and the two joint discriminators."""

    data_dim: int
    latent_dim: int
    likelihood: str
    encoder: Mlp
    decoder: Mlp
    disc1: Mlp
    disc2: Mlp

    def networks(self) -> dict[str, Mlp]:
        return {"enc": self.encoder, "dec": self.decoder, "d1": self.disc1, "d2": self.disc2}


def build_bundle(
    data_dim: int,
    latent_dim: int,
    stream: RngStream,
    hidden: tuple[int, ...] = (256, 256),
    activation: str = "tanh",
    likelihood: str = "gaussian",
    disc_dropout: float = 0.1,
) -> ModelBundle:
    """Construct the four networks with one deterministic init stream.

    Encoder emits mean and log-variance stacked on the last axis; a
    gaussian decoder does the same for x, a bernoulli decoder emits
    logits. Discriminators read concat(x, z), use the leaky activation,
    and are the only nets with dropout.
    """
    if likelihood not in LIKELIHOODS:
        raise ContractError(f"unknown likelihood '{likelihood}'")
    enc_spec = MlpSpec((data_dim, *hidden, 2 * latent_dim), activation)
    dec_out = 2 * data_dim if likelihood == "gaussian" else data_dim
    dec_spec = MlpSpec((latent_dim, *hidden, dec_out), activation)
    disc_spec = MlpSpec((data_dim + latent_dim, *hidden, 1), "leaky", disc_dropout)
    return ModelBundle(
        data_dim=data_dim,
        latent_dim=latent_dim,
        likelihood=likelihood,
        encoder=build_mlp(enc_spec, stream),
        decoder=build_mlp(dec_spec, stream),
        disc1=build_mlp(disc_spec, stream),
        disc2=build_mlp(disc_spec, stream),
    )


def detach_bundle(bundle: ModelBundle) -> ModelBundle:
    return replace(
        bundle,
        encoder=detach_mlp(bundle.encoder),
        decoder=detach_mlp(bundle.decoder),
        disc1=detach_mlp(bundle.disc1),
        disc2=detach_mlp(bundle.disc2),
    )


def encoder_forward(bundle: ModelBundle, x: Tensor) -> DiagonalGaussian:
    """q(z|x): mean is the first latent_dim outputs, log-var the rest."""
    out = mlp_forward(bundle.encoder, x)
    d = bundle.latent_dim
    return DiagonalGaussian(ad.slice_last(out, 0, d), ad.slice_last(out, d, 2 * d))


def decoder_forward(bundle: ModelBundle, z: Tensor) -> DiagonalGaussian | BernoulliVec:
    """p(x|z): gaussian head splits mean/log-var, bernoulli head is logits."""
    out = mlp_forward(bundle.decoder, z)
    if bundle.likelihood == "gaussian":
        d = bundle.data_dim
        return DiagonalGaussian(ad.slice_last(out, 0, d), ad.slice_last(out, d, 2 * d))
    return BernoulliVec(out)


def discriminator_forward(
    disc: Mlp,
    x: Tensor,
    z: Tensor,
    stream: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    """Scalar logit per pair, shape [batch]."""
    out = mlp_forward(disc, ad.concat_last(x, z), stream=stream, training=training)
    return ad.tsum(out, axis=-1)
