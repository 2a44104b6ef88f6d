"""Training objectives: ELBO, adversarial games, and the symmetric loss.

The symmetric family trains an encoder/decoder pair so that the encoder
joint q(x, z) = q(x) q(z|x) and the decoder joint p(x, z) = p(z) p(x|z)
match in both KL directions. Two discriminators supply the intractable
log-ratios:

* game 1 separates encoder-joint pairs (real) from decoder-marginal x
  paired with fresh prior z (fake); its optimal output is
  log q(x, z) - log p(x) p(z).
* game 2 separates decoder-joint pairs (real) from data x paired with
  the encoder code of a different data point (fake); its optimal output
  is log p(x, z) - log q(x) q(z).

The generator minimizes reconstruction terms in both directions plus
the mean discriminator outputs on its own samples; with optimal
discriminators this equals the symmetric KL objective up to constants
that do not depend on the model.

Sign conventions per loss are spelled out in each docstring and pinned
by tests that recompute ``total`` from ``components``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

from . import autodiff as ad
from . import distributions as dist
from . import networks as net
from .autodiff import Tensor, sample_standard_normal
from .errors import ContractError, ShapeError
from .networks import ModelBundle
from .rng import RngStream

PAIR_TAGS = ("encoder_joint", "decoder_joint", "product_pq", "product_qq")


@dataclass(frozen=True)
class PairBatch:
    """An (x, z) batch stamped with which joint it was drawn from.

    The tag is trusted by the adversarial objectives to route real and
    fake samples correctly, so only the sampler functions below should
    construct these.
    """

    x: Tensor
    z: Tensor
    tag: str

    def __post_init__(self) -> None:
        if self.tag not in PAIR_TAGS:
            raise ContractError(f"unknown pair tag '{self.tag}'")
        if self.x.ndim != 2 or self.z.ndim != 2:
            raise ShapeError("pair members must be [batch, dim]")
        if self.x.shape[0] != self.z.shape[0]:
            raise ShapeError(
                f"pair batch sizes differ: x {self.x.shape[0]} vs z {self.z.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def detach(self) -> "PairBatch":
        return PairBatch(self.x.detach(), self.z.detach(), self.tag)


@dataclass
class LossReport:
    """Scalar objective plus its named pieces.

    ``total_tensor`` is the differentiable scalar; ``total`` and
    ``components`` are plain floats for logging. Each producer
    documents how components combine into the total, and tests hold it
    to that.
    """

    total: float
    components: dict[str, float]
    total_tensor: Tensor


def decoder_log_prob(d, x: Tensor) -> Tensor:
    """log p(x) under either decoder head, one value per row."""
    if isinstance(d, dist.DiagonalGaussian):
        return dist.gaussian_log_prob(d, x)
    return dist.bernoulli_log_prob(d, x)


def _decoder_point(d, noise: Tensor) -> Tensor:
    """A differentiable x from the decoder head.

    Gaussian heads use the location-scale draw mean + std * noise. A
    bernoulli head contributes its mean field (a hard draw would block
    gradients); the noise argument is ignored there.
    """
    if isinstance(d, dist.DiagonalGaussian):
        return dist.reparam_sample(d, noise)
    return d.mean()


# ---------------------------------------------------------------------------
# Pair samplers. All stream consumption is in a fixed order so a given
# (stream state, inputs) pair always yields bit-identical batches.
# ---------------------------------------------------------------------------


def sample_encoder_joint(bundle: ModelBundle, x: Tensor, stream: RngStream) -> PairBatch:
    """(x, z) with x from data and z ~ q(z|x) via the location-scale draw."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    q = net.encoder_forward(bundle, x)
    eps = sample_standard_normal(stream, q.shape)
    return PairBatch(x, dist.reparam_sample(q, eps), "encoder_joint")


def sample_decoder_joint(bundle: ModelBundle, n: int, stream: RngStream) -> PairBatch:
    """(x, z) with z ~ p(z) and x from the decoder head at that z."""
    z = sample_standard_normal(stream, (n, bundle.latent_dim))
    d = net.decoder_forward(bundle, z)
    xi = sample_standard_normal(stream, (n, bundle.data_dim))
    return PairBatch(_decoder_point(d, xi), z, "decoder_joint")


def sample_product_pq(bundle: ModelBundle, n: int, stream: RngStream) -> PairBatch:
    """(x, z) from p(x) p(z): a decoder-marginal x with an independent prior z."""
    gen = sample_decoder_joint(bundle, n, stream)
    z_indep = sample_standard_normal(stream, (n, bundle.latent_dim))
    return PairBatch(gen.x, z_indep, "product_pq")


def sample_product_qq(
    bundle: ModelBundle, x: Tensor, x_other: Tensor, stream: RngStream
) -> PairBatch:
    """(x, z) from q(x) q(z): data x paired with the code of other data.

    The two batches should be disjoint rows of the dataset; overlapping
    rows correlate x with z and bias the product game, so overlap is
    reported as a warning rather than silently accepted.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_other = x_other if isinstance(x_other, Tensor) else Tensor(x_other)
    rows = {row.tobytes() for row in x.data}
    if any(row.tobytes() in rows for row in x_other.data):
        warnings.warn("product_qq batches share rows; z is not independent of x")
    other = sample_encoder_joint(bundle, x_other, stream)
    return PairBatch(x, other.z, "product_qq")


# ---------------------------------------------------------------------------
# Discriminator objectives.
# ---------------------------------------------------------------------------


def _log_sigmoid(t: Tensor) -> Tensor:
    return -ad.softplus(-t)


def _log_one_minus_sigmoid(t: Tensor) -> Tensor:
    return -ad.softplus(t)


def _binary_game_value(
    disc: net.Mlp, real: PairBatch, fake: PairBatch, stream, training: bool
) -> Tensor:
    f_real = net.discriminator_forward(disc, real.x, real.z, stream, training)
    f_fake = net.discriminator_forward(disc, fake.x, fake.z, stream, training)
    return _log_sigmoid(f_real).mean() + _log_one_minus_sigmoid(f_fake).mean()


def adv_objective_a1(
    disc1: net.Mlp,
    real: PairBatch,
    fake: PairBatch,
    stream: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    """Game-1 value E_real[log sig f] + E_fake[log(1 - sig f)], to maximize.

    Real pairs must come from the encoder joint and fake pairs from
    p(x) p(z). Pairs are detached here: this objective trains the
    discriminator only, never the generator through it.
    """
    if real.tag != "encoder_joint":
        raise ContractError(f"game 1 real pairs must be encoder_joint, got '{real.tag}'")
    if fake.tag != "product_pq":
        raise ContractError(f"game 1 fake pairs must be product_pq, got '{fake.tag}'")
    return _binary_game_value(disc1, real.detach(), fake.detach(), stream, training)


def adv_objective_a2(
    disc2: net.Mlp,
    real: PairBatch,
    fake: PairBatch,
    stream: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    """Game-2 value, to maximize: real from the decoder joint, fake from q(x) q(z)."""
    if real.tag != "decoder_joint":
        raise ContractError(f"game 2 real pairs must be decoder_joint, got '{real.tag}'")
    if fake.tag != "product_qq":
        raise ContractError(f"game 2 fake pairs must be product_qq, got '{fake.tag}'")
    return _binary_game_value(disc2, real.detach(), fake.detach(), stream, training)


def ali_loss(
    disc: net.Mlp,
    real: PairBatch,
    fake: PairBatch,
    stream: RngStream | None = None,
    training: bool = False,
) -> Tensor:
    """Joint-matching GAN value with encoder pairs real, decoder pairs fake.

    Returns E_enc[log sig f] + E_dec[log(1 - sig f)]. Unlike the game
    objectives above this does not detach: the discriminator phase
    maximizes it with detached pairs, the generator phase minimizes it
    through live pairs with a detached discriminator, and the caller
    arranges whichever applies.
    """
    if real.tag != "encoder_joint":
        raise ContractError(f"ali real pairs must be encoder_joint, got '{real.tag}'")
    if fake.tag != "decoder_joint":
        raise ContractError(f"ali fake pairs must be decoder_joint, got '{fake.tag}'")
    return _binary_game_value(disc, real, fake, stream, training)


# ---------------------------------------------------------------------------
# Generator objectives.
# ---------------------------------------------------------------------------


def elbo_vae(bundle: ModelBundle, x: Tensor, stream: RngStream) -> LossReport:
    """Evidence lower bound, to maximize.

    total = recon_x - kl, with recon_x = mean log p(x|z) at one
    posterior draw and kl = mean KL(q(z|x) || N(0, I)).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    q = net.encoder_forward(bundle, x)
    eps = sample_standard_normal(stream, q.shape)
    z = dist.reparam_sample(q, eps)
    recon = decoder_log_prob(net.decoder_forward(bundle, z), x).mean()
    kl = dist.kl_to_standard_normal(q).mean()
    total = recon - kl
    return LossReport(
        total=total.item(),
        components={"recon_x": recon.item(), "kl": kl.item()},
        total_tensor=total,
    )


def _x_side_terms(bundle: ModelBundle, x: Tensor, stream, training: bool):
    """recon_x = -mean log p(x | z_enc) and adv_f1 = -mean f1(x, z_enc)."""
    enc_pair = sample_encoder_joint(bundle, x, stream)
    recon_ll = decoder_log_prob(net.decoder_forward(bundle, enc_pair.z), enc_pair.x)
    recon_x = -recon_ll.mean()
    f1 = net.discriminator_forward(
        net.detach_mlp(bundle.disc1), enc_pair.x, enc_pair.z, stream, training
    )
    adv_f1 = -f1.mean()
    return recon_x, adv_f1


def _z_side_terms(bundle: ModelBundle, n: int, stream, training: bool):
    """recon_z = -mean log q(z | x_dec) and adv_f2 = -mean f2(x_dec, z)."""
    dec_pair = sample_decoder_joint(bundle, n, stream)
    q = net.encoder_forward(bundle, dec_pair.x)
    recon_z = -dist.gaussian_log_prob(q, dec_pair.z).mean()
    f2 = net.discriminator_forward(
        net.detach_mlp(bundle.disc2), dec_pair.x, dec_pair.z, stream, training
    )
    adv_f2 = -f2.mean()
    return recon_z, adv_f2


def asvae_generator_loss(
    bundle: ModelBundle, x: Tensor, stream: RngStream, training: bool = False
) -> LossReport:
    """Symmetric generator loss, to minimize.

    total = recon_x + recon_z - adv_f1 - adv_f2, where recon_x and
    recon_z are reconstruction NLLs in the two directions and adv_f1,
    adv_f2 are the negated mean discriminator outputs on encoder-joint
    and decoder-joint pairs. Discriminator parameters are frozen here;
    gradients reach the encoder and decoder only.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    recon_x, adv_f1 = _x_side_terms(bundle, x, stream, training)
    recon_z, adv_f2 = _z_side_terms(bundle, x.shape[0], stream, training)
    total = recon_x + recon_z - adv_f1 - adv_f2
    return LossReport(
        total=total.item(),
        components={
            "recon_x": recon_x.item(),
            "recon_z": recon_z.item(),
            "adv_f1": adv_f1.item(),
            "adv_f2": adv_f2.item(),
        },
        total_tensor=total,
    )


def asvae_r_loss(
    bundle: ModelBundle, x: Tensor, stream: RngStream, training: bool = False
) -> LossReport:
    """x-side half of the symmetric loss: total = recon_x - adv_f1."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    recon_x, adv_f1 = _x_side_terms(bundle, x, stream, training)
    total = recon_x - adv_f1
    return LossReport(
        total=total.item(),
        components={"recon_x": recon_x.item(), "adv_f1": adv_f1.item()},
        total_tensor=total,
    )


def asvae_g_loss(
    bundle: ModelBundle, n: int, stream: RngStream, training: bool = False
) -> LossReport:
    """z-side half of the symmetric loss: total = recon_z - adv_f2."""
    recon_z, adv_f2 = _z_side_terms(bundle, n, stream, training)
    total = recon_z - adv_f2
    return LossReport(
        total=total.item(),
        components={"recon_z": recon_z.item(), "adv_f2": adv_f2.item()},
        total_tensor=total,
    )


def asvae_minmax_disc_loss(
    bundle: ModelBundle,
    x: Tensor,
    stream: RngStream,
    training: bool = False,
    sides: tuple[str, ...] = ("x", "z"),
) -> Tensor:
    """Experimental single-objective discriminator loss, to minimize.

    The literal one-objective reading of the min-max training rule has
    the discriminators ascend the generator's own objective, whose
    discriminator-dependent part is just the mean output on generator
    samples. There is no fake-sample term, so nothing anchors the
    discriminators and the updates are typically divergent; this exists
    behind the ``disc_objective=minmax`` config switch for side-by-side
    comparison, not for use.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    frozen = net.detach_bundle(bundle)
    pieces = []
    if "x" in sides:
        pair = sample_encoder_joint(frozen, x, stream).detach()
        pieces.append(net.discriminator_forward(bundle.disc1, pair.x, pair.z, stream, training).mean())
    if "z" in sides:
        pair = sample_decoder_joint(frozen, x.shape[0], stream).detach()
        pieces.append(net.discriminator_forward(bundle.disc2, pair.x, pair.z, stream, training).mean())
    if not pieces:
        raise ContractError("minmax disc loss needs at least one side")
    value = pieces[0] if len(pieces) == 1 else pieces[0] + pieces[1]
    return -value
