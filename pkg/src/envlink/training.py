"""Losses, node-wise interventions, and the training loop.

One epoch runs the full pipeline: encode the train+val prefix, rebuild the
observed sample library and a freshly generated one, recompute every node's
invariant/variant channel partition, take the invariant-masked link-prediction
loss, measure the variance of the unmasked loss under repeated variant-channel
replacement interventions, and descend the weighted sum of the three terms
with Adam.  Validation AUC drives early stopping with best-epoch restore.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .cvae import (
    CondVae,
    SampleLibrary,
    cvae_loss,
    draw_intervention_values,
    generate_samples,
    multilabel_batch,
    observed_samples,
)
from .encoder import EnvEncoder, EnvRepresentation
from .graphs import DynamicGraph, SplitSpec, sample_negative_edges
from .invariance import InvariantPartition, channel_variance_all, masks_from_partitions, partition_all
from .metrics import auc
from .optim import AdamState, adam_step
from .rng import Rng, derive
from .tensor import Tensor, concat, reduce, replace_where, reshape, take


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    """All knobs for one training run.

    ``alpha`` weights the intervention-variance penalty, ``beta`` the sample
    model loss; ``interventions`` is the number of replacement draws whose
    loss variance is penalized; ``intervention_ratio`` the fraction of nodes
    intervened on; ``mixing_ratio`` the probability a replacement comes from
    the observed rather than the generated library.
    """

    alpha: float = 1.0
    beta: float = 1e-4
    interventions: int = 3
    intervention_ratio: float = 0.6
    mixing_ratio: float = 0.5
    channels: int = 5
    hidden_dim: int = 16
    layers: int = 2
    latent_dim: int = 16
    cvae_hidden: int = 64
    quant_scale: int = 1000
    partition_rule: str = "threshold"
    lr: float = 0.01
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0
    cvae_batch: int = 1024
    library_size: int | None = None  # generated sample count; None tracks |observed|


@dataclass
class LossReport:
    """Per-epoch loss terms; total == task + alpha*risk + beta*cvae."""

    epoch: int
    task: float
    risk: float
    cvae: float
    total: float
    val_auc: float | None = None


@dataclass
class Model:
    encoder: EnvEncoder
    cvae: CondVae

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.cvae.parameters()


def build_model(feature_dim: int, num_snapshots: int, cfg: TrainConfig) -> Model:
    encoder = EnvEncoder(
        feature_dim=feature_dim, channels=cfg.channels, hidden_dim=cfg.hidden_dim,
        layers=cfg.layers, seed=derive(cfg.seed, "encoder"),
    )
    cvae = CondVae(
        sample_dim=cfg.hidden_dim, channels=cfg.channels, snapshots=num_snapshots,
        latent_dim=cfg.latent_dim, hidden_dim=cfg.cvae_hidden, seed=derive(cfg.seed, "cvae"),
    )
    return Model(encoder=encoder, cvae=cvae)


# --------------------------------------------------------------------------
# link scoring and task loss


def pair_logits(rep: EnvRepresentation, t: int, pairs: np.ndarray,
                node_masks: np.ndarray | None = None) -> Tensor:
    """Inner-product logits for node pairs at time t.

    With masks given, each node's variant channels are zeroed before the dot
    product, which is equivalent to restricting the product to channels both
    endpoints consider invariant.
    """
    z_t = rep.at_time(t)
    n, k, d = z_t.shape
    if node_masks is not None:
        z_t = z_t * Tensor(node_masks.reshape(n, k, 1))
    flat = reshape(z_t, (n, k * d))
    zu = take(flat, pairs[:, 0])
    zv = take(flat, pairs[:, 1])
    return reduce("sum", zu * zv, axis=1)


def predict_links(rep: EnvRepresentation, t: int, pairs: np.ndarray,
                  node_masks: np.ndarray | None = None) -> Tensor:
    """Sigmoid link scores for node pairs at time t."""
    return pair_logits(rep, t, pairs, node_masks).sigmoid()


def _bce_terms(rep, t, pos, neg, node_masks) -> Tensor:
    """Mean binary cross-entropy over one prediction step, logit-stable."""
    total = len(pos) + len(neg)
    parts = []
    if len(pos):
        parts.append((-pair_logits(rep, t, pos, node_masks)).softplus().sum())
    if len(neg):
        parts.append(pair_logits(rep, t, neg, node_masks).softplus().sum())
    out = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return out * (1.0 / total)


def task_loss(rep: EnvRepresentation, g: DynamicGraph, split: SplitSpec,
              node_masks: np.ndarray | None, negatives: dict[int, np.ndarray]) -> Tensor:
    """Link BCE over consecutive train pairs: time t scores snapshot t+1.

    Each step's positives are snapshot t+1's edges against the supplied
    equal-count negatives; the mean is taken per step and then across steps.
    """
    steps = list(split.train_range)[:-1]
    if len(steps) < 1:
        raise ValueError("task loss needs at least 2 training snapshots")
    terms = []
    for t in steps:
        pos = g.snapshots[t + 1]
        if len(pos) == 0:
            continue
        terms.append(_bce_terms(rep, t, pos, negatives[t + 1], node_masks))
    if not terms:
        raise ValueError("no training edges to supervise on")
    total = terms[0]
    for extra in terms[1:]:
        total = total + extra
    return total * (1.0 / len(terms))


# --------------------------------------------------------------------------
# interventions and the variance penalty


def intervene(z: Tensor, partitions: list[InvariantPartition], library: SampleLibrary,
              ratio: float, mixing_ratio: float, seed: int) -> Tensor:
    """Replace variant-channel slices of selected nodes with library samples.

    ceil(ratio * N) nodes are chosen uniformly; for each chosen node, every
    variant channel at every time gets an independently drawn replacement
    vector.  Invariant channels and unselected nodes are bit-identical to the
    input, and replacements carry no gradient.
    """
    if library.total == 0:
        raise ValueError("intervention needs a nonempty sample library")
    n, t_len, k, d = z.shape
    rng = Rng(derive(seed, "intervene"))
    count = int(np.ceil(ratio * n))
    chosen = rng.subset(n, count)
    node_idx: list[int] = []
    chan_idx: list[int] = []
    for v in chosen:
        for ch in partitions[v].variant:
            node_idx.append(int(v))
            chan_idx.append(int(ch))
    if not node_idx:
        return replace_where(z, np.zeros((n, t_len, k, 1), dtype=bool), np.zeros_like(z.data))
    v_idx = np.repeat(np.asarray(node_idx, dtype=np.int64), t_len)
    k_idx = np.repeat(np.asarray(chan_idx, dtype=np.int64), t_len)
    t_idx = np.tile(np.arange(t_len, dtype=np.int64), len(node_idx))
    values = draw_intervention_values(library, len(v_idx), mixing_ratio, rng)
    mask = np.zeros((n, t_len, k), dtype=bool)
    mask[v_idx, t_idx, k_idx] = True
    replacement = np.zeros_like(z.data)
    replacement[v_idx, t_idx, k_idx] = values
    return replace_where(z, mask[..., None], replacement)


def risk_loss(rep: EnvRepresentation, g: DynamicGraph, split: SplitSpec,
              partitions: list[InvariantPartition], library: SampleLibrary,
              cfg: TrainConfig, negatives: dict[int, np.ndarray], seed: int) -> Tensor:
    """Population variance of the unmasked task loss across intervention draws.

    A single draw has no spread, so interventions <= 1 returns zero by
    convention.
    """
    if cfg.interventions <= 1:
        return Tensor(0.0)
    losses = []
    for s in range(cfg.interventions):
        z_s = intervene(rep.z, partitions, library, cfg.intervention_ratio,
                        cfg.mixing_ratio, derive(seed, "draw", s))
        rep_s = EnvRepresentation(z=z_s, pre_pool=rep.pre_pool)
        losses.append(reshape(task_loss(rep_s, g, split, None, negatives), (1,)))
    return reduce("variance", concat(losses, axis=0))


# --------------------------------------------------------------------------
# epoch body and the fit loop


@dataclass
class EpochState:
    report: LossReport
    rep: EnvRepresentation
    masks: np.ndarray
    partitions: list[InvariantPartition]


def _epoch_negatives(g: DynamicGraph, split: SplitSpec, seed: int) -> dict[int, np.ndarray]:
    out = {}
    for t in list(split.train_range)[:-1]:
        target = t + 1
        out[target] = sample_negative_edges(g, target, len(g.snapshots[target]),
                                            derive(seed, "train-neg", target))
    return out


def total_step(model: Model, g: DynamicGraph, split: SplitSpec, cfg: TrainConfig,
               opt: AdamState, epoch: int) -> EpochState:
    """One epoch: encode, rebuild libraries and partitions, descend the
    composite objective task + alpha * risk + beta * cvae."""
    from .tensor import Tape, backward  # local import keeps module top tidy

    seed = derive(cfg.seed, "epoch", epoch)
    upto = split.val_range.stop
    with Tape() as tape:
        rep = model.encoder.encode(g, upto=upto)

        obs, obs_labels = observed_samples(rep)
        batch_rng = Rng(derive(seed, "cvae-batch"))
        pick = batch_rng.subset(len(obs), min(cfg.cvae_batch, len(obs)))
        y = multilabel_batch(obs_labels[pick, 0], obs_labels[pick, 1],
                             model.cvae.channels, model.cvae.snapshots)
        eps = Rng(derive(seed, "cvae-eps")).normal((len(pick), cfg.latent_dim))
        l_cvae = cvae_loss(model.cvae, obs[pick], y, eps)

        gen_count = cfg.library_size if cfg.library_size else len(obs)
        gen, gen_labels = generate_samples(model.cvae, gen_count, derive(seed, "generate"),
                                           max_time=upto)
        library = SampleLibrary(obs, obs_labels, gen, gen_labels)

        partitions = partition_all(channel_variance_all(rep.z.data),
                                   cfg.partition_rule, cfg.quant_scale)
        masks = masks_from_partitions(partitions, cfg.channels)

        negatives = _epoch_negatives(g, split, seed)
        l_task = task_loss(rep, g, split, masks, negatives)
        if cfg.alpha > 0:
            l_risk = risk_loss(rep, g, split, partitions, library, cfg, negatives,
                               derive(seed, "risk"))
        else:
            l_risk = Tensor(0.0)
        total = l_task + l_risk * cfg.alpha + l_cvae * cfg.beta

    task_v, risk_v, cvae_v, total_v = (l_task.item(), l_risk.item(), l_cvae.item(), total.item())
    if not np.isfinite(total_v):
        raise NumericError(f"non-finite loss at epoch {epoch}: {total_v}")
    backward(total, tape)
    adam_step(opt)
    report = LossReport(epoch=epoch, task=task_v, risk=risk_v, cvae=cvae_v, total=total_v)
    return EpochState(report=report, rep=rep, masks=masks, partitions=partitions)


def validation_auc(rep: EnvRepresentation, split: SplitSpec, masks: np.ndarray | None) -> float:
    """Masked-predictor AUC averaged over validation snapshots, each scored
    from the representation one step earlier."""
    scores = []
    for tv in split.val_range:
        pos = predict_links(rep, tv - 1, split.positives[tv], masks).data
        neg = predict_links(rep, tv - 1, split.negatives[tv], masks).data
        scores.append(auc(pos, neg))
    return float(np.mean(scores))


@dataclass
class FitResult:
    best_epoch: int
    best_val_auc: float
    history: list[LossReport] = field(default_factory=list)
    partitions: list[InvariantPartition] | None = None


def fit(model: Model, g: DynamicGraph, split: SplitSpec, cfg: TrainConfig,
        opt: AdamState | None = None) -> FitResult:
    """Epoch loop with early stopping on validation AUC.

    Stops after ``patience`` epochs without strict improvement (or at
    ``max_epochs``) and restores the best epoch's parameters.
    """
    if len(split.train_range) < 2:
        raise ValueError("fit needs at least 2 training snapshots")
    opt = opt or AdamState(model.parameters(), lr=cfg.lr)
    params = model.parameters()
    best_state = [p.data.copy() for p in params]
    best_auc = -np.inf
    best_epoch = 0
    stale = 0
    history: list[LossReport] = []
    for epoch in range(1, cfg.max_epochs + 1):
        # the epoch's representation (and so its validation AUC) comes from
        # the parameters entering the epoch; snapshot those for restore
        pre_state = [p.data.copy() for p in params]
        state = total_step(model, g, split, cfg, opt, epoch)
        val = validation_auc(state.rep, split, state.masks)
        state.report.val_auc = val
        history.append(state.report)
        if val > best_auc:
            best_auc = val
            best_epoch = epoch
            best_state = pre_state
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, saved in zip(params, best_state):
        p.data[:] = saved
    return FitResult(best_epoch=best_epoch, best_val_auc=float(best_auc), history=history)


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"EVLKCKP1"
_VERSION = 1


def _named_arrays(model: Model, opt: AdamState | None) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param.{i}", p.data) for i, p in enumerate(model.parameters())]
    if opt is not None:
        entries += [(f"adam.m.{i}", m) for i, m in enumerate(opt.m)]
        entries += [(f"adam.v.{i}", v) for i, v in enumerate(opt.v)]
        entries.append(("adam.t", np.array([float(opt.t)])))
    return entries


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, model: Model, opt: AdamState | None, config: dict) -> None:
    """Flat binary layout: magic, version, config digest, embedded config
    JSON, then (name, shape, little-endian float64 data) records."""
    blob = json.dumps(config, sort_keys=True).encode()
    entries = _named_arrays(model, opt)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(hashlib.sha256(blob).digest())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        (blob_len,) = struct.unpack("<I", fh.read(4))
        blob = fh.read(blob_len)
        if hashlib.sha256(blob).digest() != digest:
            raise ValueError(f"{path}: config digest mismatch")
        config = json.loads(blob.decode())
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(shape).copy()
    return config, arrays


def restore_model(model: Model, arrays: dict[str, np.ndarray],
                  opt: AdamState | None = None) -> None:
    params = model.parameters()
    for i, p in enumerate(params):
        saved = arrays[f"param.{i}"]
        if saved.shape != p.data.shape:
            raise ValueError(f"checkpoint param.{i} shape {saved.shape} != model {p.data.shape}")
        p.data[:] = saved
    if opt is not None and "adam.t" in arrays:
        for i in range(len(params)):
            opt.m[i][:] = arrays[f"adam.m.{i}"]
            opt.v[i][:] = arrays[f"adam.v.{i}"]
        opt.t = int(arrays["adam.t"][0])
