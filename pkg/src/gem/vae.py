"""Attribute-extraction branch: encoder, decoder, density-ratio discriminator.

The encoder produces a diagonal-Gaussian posterior per image and a
reparameterized sample z.  The decoder consumes the relation-aware latent
(z propagated through the graph), so the standard-normal prior assumption is
repaired by an adversarially trained density-ratio network D(x, z): D is
fitted to tell matched (x_i, z_i) pairs from shuffled (x_i, z_{pi(i)}) pairs
with a softplus loss, and its logit on matched pairs enters the
encoder/decoder objective as the ratio surrogate.

Training alternates one discriminator update with one encoder/decoder/graph
update per step; each side's update never touches the other side's weights.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import disgraph
from . import numcore as nc
from .disgraph import DisGraph, GraphLearner
from .errors import ConfigError, DataError, DivergenceError, DomainError, ShapeError
from .numcore import ParameterSet, Rng, Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class EncoderOutput:
    """Posterior parameters and the reparameterized sample for one batch."""

    mu: Tensor
    log_var: Tensor
    z: Tensor
    eps: np.ndarray  # recorded noise, so the draw is reproducible


@dataclass
class LossBreakdown:
    reconstruction: float
    kl: float
    adv: float
    dis: float
    total: float
    discriminator: float = float("nan")

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in
                   (self.reconstruction, self.kl, self.adv, self.dis, self.total))


class VaeModel:
    """Encoder, decoder and discriminator MLPs over flattened images.

    Hidden layers use tanh; the decoder output is a sigmoid so pixels live in
    (0, 1).  The encoder head carries 2n units: n posterior means and n
    log-variances (clamped to [-10, 10]).
    """

    def __init__(self, image_side: int, latent_n: int, rng: Rng,
                 enc_hidden: tuple[int, int] = (256, 128),
                 dec_hidden: tuple[int, int] = (128, 256),
                 disc_hidden: tuple[int, int] = (256, 128)):
        self.image_side = image_side
        self.latent_n = latent_n
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.disc_hidden = disc_hidden
        d = image_side * image_side

        self.encoder = ParameterSet("encoder")
        self._add_mlp(self.encoder, rng, [d, enc_hidden[0], enc_hidden[1], 2 * latent_n])
        self.decoder = ParameterSet("decoder")
        self._add_mlp(self.decoder, rng, [latent_n, dec_hidden[0], dec_hidden[1], d])
        self.discriminator = ParameterSet("discriminator")
        self._add_mlp(self.discriminator, rng, [d + latent_n, disc_hidden[0],
                                                disc_hidden[1], 1])

    @staticmethod
    def _add_mlp(params: ParameterSet, rng: Rng, sizes: list[int]) -> None:
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params.add(f"w{k}", nc.glorot_uniform(rng, fan_in, fan_out))
            params.add(f"b{k}", np.zeros((1, fan_out)))

    @staticmethod
    def _mlp_forward(params: ParameterSet, x: Tensor, n_layers: int) -> Tensor:
        h = x
        for k in range(n_layers):
            h = nc.add(nc.matmul(h, params[f"w{k}"]), params[f"b{k}"])
            if k < n_layers - 1:
                h = nc.tanh(h)
        return h

    def encoder_heads(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.cols != self.image_side * self.image_side:
            raise ShapeError(f"expected {self.image_side ** 2} pixel columns, got {x.cols}")
        heads = self._mlp_forward(self.encoder, x, 3)
        mu = nc.col_slice(heads, 0, self.latent_n)
        log_var = nc.clamp(nc.col_slice(heads, self.latent_n, 2 * self.latent_n),
                           LOG_VAR_MIN, LOG_VAR_MAX)
        return mu, log_var

    def encode(self, x: Tensor, eps: np.ndarray) -> EncoderOutput:
        """Forward the encoder and reparameterize with the given noise.

        eps may hold n_m stacked noise blocks of the batch size; mu/log_var
        rows are tiled to match.
        """
        mu, log_var = self.encoder_heads(x)
        b = x.rows
        if eps.shape[0] % b != 0 or eps.shape[1] != self.latent_n:
            raise ShapeError(f"noise shape {eps.shape} incompatible with batch {b}")
        n_m = eps.shape[0] // b
        mu_r, lv_r = mu, log_var
        if n_m > 1:
            mu_r = nc.vconcat([mu] * n_m)
            lv_r = nc.vconcat([log_var] * n_m)
        std = nc.exp(nc.affine(lv_r, 0.5))
        z = nc.add(mu_r, nc.mul(std, nc.constant(eps)))
        return EncoderOutput(mu=mu, log_var=log_var, z=z, eps=eps)

    def decode(self, z_rel: Tensor) -> Tensor:
        if z_rel.cols != self.latent_n:
            raise ShapeError(f"expected {self.latent_n} latent columns, got {z_rel.cols}")
        return nc.sigmoid(self._mlp_forward(self.decoder, z_rel, 3))

    def discriminate(self, x: Tensor, z: Tensor) -> Tensor:
        if x.rows != z.rows:
            raise ShapeError(f"batch mismatch: {x.rows} images vs {z.rows} latents")
        return self._mlp_forward(self.discriminator, nc.hconcat(x, z), 3)

    def trainable_sets(self) -> list[ParameterSet]:
        return [self.encoder, self.decoder, self.discriminator]

    def n_params(self) -> int:
        return sum(s.n_params() for s in self.trainable_sets())


# ---------------------------------------------------------------------------
# losses


def kl_divergence(out: EncoderOutput) -> Tensor:
    """Mean closed-form KL against the standard normal, per batch row."""
    b = out.mu.rows
    terms = nc.add(nc.add(nc.square(out.mu), nc.exp(out.log_var)),
                   nc.affine(out.log_var, -1.0, -1.0))
    return nc.affine(nc.sum_all(terms), 0.5 / b)


def reconstruction_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean per-pixel binary cross-entropy for pixels in [0, 1]."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    eps = 1e-12  # nudge away from exact 0/1 so the logs stay finite
    safe = nc.affine(x_hat, 1.0 - 2.0 * eps, eps)
    one_minus_x = nc.affine(x, -1.0, 1.0)
    ll = nc.add(nc.mul(x, nc.log(safe)),
                nc.mul(one_minus_x, nc.log(nc.affine(safe, -1.0, 1.0))))
    return nc.affine(nc.mean_all(ll), -1.0)


def adversarial_loss(model: VaeModel, x: Tensor, z_joint: Tensor,
                     z_shuffled: Tensor) -> tuple[Tensor, Tensor]:
    """Density-ratio pair: discriminator loss and the matched-pair logit mean.

    loss_d averages softplus(-D(x, z_joint)) + softplus(D(x, z_shuffled));
    ratio_term is the mean logit on matched pairs, the surrogate the
    encoder/decoder side consumes (negated there).
    """
    if x.rows != z_joint.rows or x.rows != z_shuffled.rows:
        raise ShapeError("adversarial batches must have equal row counts")
    d_joint = model.discriminate(x, z_joint)
    d_shuf = model.discriminate(x, z_shuffled)
    count = x.rows
    loss_d = nc.affine(nc.add(nc.sum_all(nc.softplus(nc.affine(d_joint, -1.0))),
                              nc.sum_all(nc.softplus(d_shuf))), 1.0 / count)
    ratio_term = nc.mean_all(d_joint)
    return loss_d, ratio_term


def total_loss(recon: Tensor, kl: Tensor, adv: Tensor, beta: float,
               lambda_adv: float, lambda_dis: float) -> tuple[Tensor, LossBreakdown]:
    """Combine the pieces: dis = recon + beta*kl, total = l_adv*adv + l_dis*dis."""
    if lambda_adv < 0 or lambda_dis < 0 or beta < 0:
        raise ConfigError("loss weights must be non-negative")
    dis = nc.add(recon, nc.affine(kl, beta))
    total = nc.add(nc.affine(adv, lambda_adv), nc.affine(dis, lambda_dis))
    parts = LossBreakdown(reconstruction=recon.item(), kl=kl.item(),
                          adv=adv.item(), dis=dis.item(), total=total.item())
    return total, parts


# ---------------------------------------------------------------------------
# training


@dataclass
class GraphRuntime:
    """Graph state threaded through training steps."""

    graph: DisGraph
    learner: GraphLearner
    enabled: bool = True
    sketch: np.ndarray = field(default=None)  # frozen T0 = the sketched adjacency

    def __post_init__(self):
        if self.sketch is None:
            self.sketch = self.graph.prior.copy()


def generator_objective(model: VaeModel, runtime: GraphRuntime, x_arr: np.ndarray,
                        eps: np.ndarray, beta: float, lambda_adv: float,
                        lambda_dis: float) -> tuple[Tensor, LossBreakdown, Tensor | None]:
    """Full encoder/decoder/graph-learner objective for one batch.

    Pure given the noise block, so gradients can be checked against finite
    differences.  Returns the scalar loss node, the float breakdown, and the
    refined adjacency node (None when the graph learner is disabled).
    """
    x = nc.constant(x_arr)
    out = model.encode(x, eps)
    n_m = eps.shape[0] // x.rows

    adjacency_node = None
    if runtime.enabled:
        t = disgraph.gcn_forward(runtime.learner, runtime.graph, runtime.sketch)
        adjacency_node = disgraph.refined_adjacency_node(runtime.graph, t)
    else:
        adjacency_node = nc.constant(runtime.graph.adjacency)
    z_rel = disgraph.relation_aware_node(adjacency_node, out.z)
    x_hat = model.decode(z_rel)

    x_rep = x if n_m == 1 else nc.constant(np.tile(x_arr, (n_m, 1)))
    recon = reconstruction_loss(x_rep, x_hat)
    kl = kl_divergence(out)
    ratio = nc.mean_all(model.discriminate(x_rep, out.z))
    adv = nc.affine(ratio, -1.0)
    total, parts = total_loss(recon, kl, adv, beta, lambda_adv, lambda_dis)
    refined = adjacency_node if runtime.enabled else None
    return total, parts, refined


def discriminator_objective(model: VaeModel, x_arr: np.ndarray, z_arr: np.ndarray,
                            perm: np.ndarray) -> Tensor:
    """Discriminator loss on fixed (detached) latents and a row permutation."""
    n_m = z_arr.shape[0] // x_arr.shape[0]
    x_rep = nc.constant(x_arr if n_m == 1 else np.tile(x_arr, (n_m, 1)))
    loss_d, _ = adversarial_loss(model, x_rep, nc.constant(z_arr),
                                 nc.constant(z_arr[perm]))
    return loss_d


def train_step(model: VaeModel, runtime: GraphRuntime, x_arr: np.ndarray,
               config, rng: Rng, step: int = 0) -> LossBreakdown:
    """One alternation: discriminator update, then encoder/decoder/graph update.

    The refined adjacency computed on the generator pass is committed to the
    graph afterwards, so the next step propagates through it.
    """
    try:
        return _train_step(model, runtime, x_arr, config, rng, step)
    except DomainError as exc:
        raise DivergenceError(f"non-finite values during training: {exc}", step) from exc


def _train_step(model: VaeModel, runtime: GraphRuntime, x_arr: np.ndarray,
                config, rng: Rng, step: int) -> LossBreakdown:
    b = x_arr.shape[0]
    n_m = max(1, int(config.n_m))
    lr = config.lr

    # (a) discriminator on frozen encoder/decoder
    for pset in model.trainable_sets():
        pset.zero_grads()
    runtime.learner.params.zero_grads()
    eps_a = rng.normal(b * n_m, model.latent_n)
    z_detached = model.encode(nc.constant(x_arr), eps_a).z.value
    perm = rng.permutation(b * n_m)
    loss_d_node = discriminator_objective(model, x_arr, z_detached, perm)
    loss_d = loss_d_node.item()
    if not np.isfinite(loss_d):
        raise DivergenceError("discriminator loss is not finite", step)
    nc.backward(loss_d_node)
    nc.adam_step(model.discriminator, lr)

    # (b) encoder/decoder/graph on a fresh forward, discriminator frozen
    for pset in model.trainable_sets():
        pset.zero_grads()
    runtime.learner.params.zero_grads()
    eps_b = rng.normal(b * n_m, model.latent_n)
    total, parts, refined = generator_objective(
        model, runtime, x_arr, eps_b, config.effective_beta(),
        config.effective_lambda_adv(), config.lambda_dis)
    parts.discriminator = loss_d
    if not parts.finite():
        raise DivergenceError("training loss is not finite", step)
    nc.backward(total)
    nc.adam_step(model.encoder, lr)
    nc.adam_step(model.decoder, lr)
    if runtime.enabled:
        nc.adam_step(runtime.learner.params, lr)
        runtime.graph.adjacency = np.clip(refined.value, 0.0, 1.0)
        np.fill_diagonal(runtime.graph.adjacency, 0.0)
    model.discriminator.zero_grads()
    return parts


# ---------------------------------------------------------------------------
# checkpointing: key-value manifest + flat float64 blob in declaration order


def save_checkpoint(model: VaeModel, learner: GraphLearner, base_path: str,
                    step: int, config_hash: str = "") -> None:
    blob = (model.encoder.pack() + model.decoder.pack()
            + model.discriminator.pack() + learner.params.pack())
    with open(base_path + ".bin", "wb") as fh:
        fh.write(blob)
    manifest = [
        "format = 1",
        f"image_side = {model.image_side}",
        f"latent_n = {model.latent_n}",
        f"enc_hidden = {model.enc_hidden[0]},{model.enc_hidden[1]}",
        f"dec_hidden = {model.dec_hidden[0]},{model.dec_hidden[1]}",
        f"disc_hidden = {model.disc_hidden[0]},{model.disc_hidden[1]}",
        f"gcn_layers = {learner.n_layers}",
        f"gcn_nonlinearity = {learner.nonlinearity}",
        f"step = {step}",
        f"config_hash = {config_hash}",
        f"blob = {os.path.basename(base_path)}.bin",
        f"blob_sha256 = {hashlib.sha256(blob).hexdigest()}",
        "order = encoder,decoder,discriminator,gcn",
    ]
    with open(base_path + ".manifest", "w") as fh:
        fh.write("\n".join(manifest) + "\n")


def load_checkpoint(base_path: str) -> tuple[VaeModel, GraphLearner, dict]:
    kv: dict[str, str] = {}
    with open(base_path + ".manifest") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
    if kv.get("format") != "1":
        raise DataError(f"unsupported checkpoint format {kv.get('format')!r}")

    def pair(key: str) -> tuple[int, int]:
        a, b = kv[key].split(",")
        return int(a), int(b)

    rng = Rng(0)  # placeholder weights, immediately overwritten by the blob
    model = VaeModel(image_side=int(kv["image_side"]), latent_n=int(kv["latent_n"]),
                     rng=rng, enc_hidden=pair("enc_hidden"),
                     dec_hidden=pair("dec_hidden"), disc_hidden=pair("disc_hidden"))
    learner = GraphLearner(n=int(kv["latent_n"]), n_layers=int(kv["gcn_layers"]),
                           nonlinearity=kv["gcn_nonlinearity"], rng=rng)
    with open(os.path.join(os.path.dirname(base_path), kv["blob"]), "rb") as fh:
        blob = fh.read()
    if kv.get("blob_sha256") and hashlib.sha256(blob).hexdigest() != kv["blob_sha256"]:
        raise DataError("checkpoint blob does not match its manifest digest")
    offset = model.encoder.unpack(blob)
    offset = model.decoder.unpack(blob, offset)
    offset = model.discriminator.unpack(blob, offset)
    offset = learner.params.unpack(blob, offset)
    if offset != len(blob):
        raise DataError("checkpoint blob has trailing bytes")
    return model, learner, kv
