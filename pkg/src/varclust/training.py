"""Two-phase optimization: reconstruction pretraining, then joint refinement.

The joint phase alternates full-dataset target recomputation (every
``update_interval`` iterations) with mini-batch SGD on the convex combination
of the clustering KL and the network loss; training stops once the fraction of
changed hard labels between consecutive target updates drops below ``delta``.

All randomness flows through generators derived from the schedule seed, so a
run is reproducible loss-by-loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .clustering import (Centroids, ClusterStats, SoftAssignment, TargetDistribution,
                         assign_labels, kl_clustering_loss, kmeans,
                         label_change_fraction, modified_target, soft_assign)
from .data import Dataset, batch_iterator
from .errors import InvalidArgumentError, NumericDomainError
from .model import (DTYPE, MLP_VARIANT, Vae, gaussian_prior_kl, load_state_arrays,
                    reconstruction_loss, reparameterize, state_arrays)
from .persist import read_blob, write_blob

log = logging.getLogger(__name__)

ALPHA = 1.0
EMBED_BATCH = 512
CSV_HEADER = "iteration,l_c,l_r,total,lr,label_change"

# Fixed offsets keying the independent RNG streams of each phase.
_PRETRAIN_NOISE, _PRETRAIN_BATCH = 11, 12
_LAYERWISE_NOISE, _LAYERWISE_BATCH = 13, 14
_JOINT_NOISE, _JOINT_BATCH = 15, 16


@dataclass(frozen=True)
class TrainSchedule:
    """All optimization hyperparameters for both phases."""

    clustering_weight: float = 0.1      # lambda in the convex combination
    delta: float = 0.001                # label-change fraction that stops training
    update_interval: int = 100
    batch_size: int = 256
    base_lr: float = 0.01
    lr_decay_every: int = 20000
    lr_decay_factor: float = 10.0
    max_iterations: int = 20000
    pretrain_iterations: int = 10000
    seed: int = 0
    weight_decay: float = 0.0
    layerwise_iterations: int = 0       # per-layer greedy steps; 0 = end-to-end only
    dropout: float = 0.2                # applied only during layer-wise pretraining

    def __post_init__(self):
        if not 0.0 < self.clustering_weight < 1.0:
            raise InvalidArgumentError("clustering_weight must lie strictly in (0, 1)")
        if self.delta <= 0:
            raise InvalidArgumentError("delta must be positive")
        for name in ("update_interval", "batch_size", "lr_decay_every"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        for name in ("max_iterations", "pretrain_iterations", "layerwise_iterations"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be >= 0")
        if self.base_lr <= 0 or self.lr_decay_factor <= 0:
            raise InvalidArgumentError("learning-rate parameters must be positive")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout must lie in [0, 1)")


class LossRecord(NamedTuple):
    iteration: int
    l_c: float | None
    l_r: float | None
    total: float | None
    lr: float
    label_change: float | None


class UpdateRecord(NamedTuple):
    iteration: int
    clustering_loss: float
    label_change: float | None
    reseeded: tuple[int, ...]


@dataclass
class TrainState:
    """Mutable snapshot of the joint phase."""

    iteration: int
    model: Vae
    centroids: Centroids
    last_target: TargetDistribution | None
    last_labels: np.ndarray | None
    converged: bool
    loss_history: list[LossRecord] = field(default_factory=list)
    update_log: list[UpdateRecord] = field(default_factory=list)


def lr_at(iteration: int, schedule: TrainSchedule) -> float:
    """Step-decayed learning rate: base divided by factor every decay interval."""
    if iteration < 0:
        raise InvalidArgumentError("iteration must be >= 0")
    return schedule.base_lr / schedule.lr_decay_factor ** (iteration // schedule.lr_decay_every)


def total_loss(clustering_loss, network_loss, weight: float):
    """Convex combination weight * L_c + (1 - weight) * L_n."""
    if not 0.0 < weight < 1.0:
        raise InvalidArgumentError("weight must lie strictly in (0, 1)")
    return weight * clustering_loss + (1.0 - weight) * network_loss


def embed_dataset(model: Vae, dataset: Dataset, batch_size: int = EMBED_BATCH) -> np.ndarray:
    """Noise-free latent embedding (z = mu) of every sample, in dataset order."""
    chunks = []
    with torch.no_grad():
        for batch in batch_iterator(dataset, batch_size, shuffle=False):
            out = model.encode(torch.from_numpy(batch.images))
            chunks.append(out.mu.numpy())
    return np.concatenate(chunks, axis=0)


def _epoch_stream(dataset: Dataset, batch_size: int, seed: int):
    """Endless batches, reshuffled each epoch with a seed-derived order."""
    epoch = 0
    while True:
        yield from batch_iterator(dataset, batch_size, seed=seed + epoch, shuffle=True)
        epoch += 1


def _check_finite(iteration: int, lr: float, **components) -> None:
    bad = {name: float(value) for name, value in components.items()
           if not math.isfinite(float(value))}
    if bad:
        raise NumericDomainError(
            f"non-finite loss at iteration {iteration} (lr={lr:g}): {bad}")


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator) -> torch.Tensor:
    if p <= 0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=DTYPE) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


def _layerwise_pretrain(model: Vae, dataset: Dataset, schedule: TrainSchedule) -> None:
    """Greedy pairwise pretraining of the fully-connected stack.

    Each (encoder layer, mirrored decoder layer) pair is trained on the frozen
    representation of the previous layers, with dropout on the pair input and
    a least-squares reconstruction objective; the innermost encoder layer and
    outermost decoder layer stay linear.
    """
    if model.spec.variant != MLP_VARIANT:
        raise InvalidArgumentError("layer-wise pretraining supports the MLP variant only")
    noise_gen = torch.Generator().manual_seed(schedule.seed + _LAYERWISE_NOISE)
    n_hidden = len(model.enc_hidden)
    pairs = [(model.enc_hidden[0], model.dec_out, True, False)]
    for i in range(1, n_hidden):
        pairs.append((model.enc_hidden[i], model.dec_hidden[n_hidden - i], True, True))
    pairs.append((model.mu_head, model.dec_hidden[0], False, True))
    rep = torch.from_numpy(dataset.images).to(DTYPE)
    for depth, (enc, dec, enc_relu, dec_relu) in enumerate(pairs):
        opt = torch.optim.SGD([*enc.parameters(), *dec.parameters()],
                              lr=schedule.base_lr, weight_decay=schedule.weight_decay)
        stream = _epoch_stream(dataset, schedule.batch_size,
                               schedule.seed + _LAYERWISE_BATCH + depth)
        for it in range(schedule.layerwise_iterations):
            for group in opt.param_groups:
                group["lr"] = lr_at(it, schedule)
            batch = next(stream)
            target = rep[batch.indices]
            mid = enc(_dropout(target, schedule.dropout, noise_gen))
            if enc_relu:
                mid = torch.relu(mid)
            rec = dec(mid)
            if dec_relu:
                rec = torch.relu(rec)
            loss = ((rec - target) ** 2).mean()
            _check_finite(it, lr_at(it, schedule), layerwise_loss=loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            rep = enc(rep)
            if enc_relu:
                rep = torch.relu(rep)
        log.info("layer-wise pair %d/%d trained", depth + 1, len(pairs))


def pretrain(model: Vae, dataset: Dataset, schedule: TrainSchedule) -> list[LossRecord]:
    """Optimize the network loss L_n = L_r + prior KL by mini-batch SGD.

    Returns one loss record per end-to-end iteration; the model is updated in
    place. With ``layerwise_iterations`` set, a greedy layer-wise phase runs
    first (MLP variant only).
    """
    if schedule.layerwise_iterations > 0:
        _layerwise_pretrain(model, dataset, schedule)
    noise_gen = torch.Generator().manual_seed(schedule.seed + _PRETRAIN_NOISE)
    stream = _epoch_stream(dataset, schedule.batch_size, schedule.seed + _PRETRAIN_BATCH)
    opt = torch.optim.SGD(model.parameters(), lr=schedule.base_lr,
                          weight_decay=schedule.weight_decay)
    history: list[LossRecord] = []
    for it in range(schedule.pretrain_iterations):
        lr = lr_at(it, schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = next(stream)
        x = torch.from_numpy(batch.images)
        noise = torch.randn(x.shape[0], model.spec.latent_dim,
                            generator=noise_gen, dtype=DTYPE)
        total, recon, kl = _network_loss_parts(model, x, noise)
        _check_finite(it, lr, total=total, recon=recon, kl=kl)
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(LossRecord(it, None, float(total), float(total), lr, None))
    return history


def _network_loss_parts(model: Vae, x: torch.Tensor, noise: torch.Tensor):
    out = model.encode(x)
    z = reparameterize(out, noise)
    x_hat = model.decode(z)
    recon = reconstruction_loss(x, x_hat)
    kl = gaussian_prior_kl(out)
    return recon + kl, recon, kl


def init_centroids(model: Vae, dataset: Dataset, k: int, seed: int,
                   restarts: int = 20) -> tuple[Centroids, np.ndarray]:
    """K-means over the noise-free embeddings of the whole dataset."""
    if dataset.n < k:
        raise InvalidArgumentError(f"dataset of {dataset.n} samples cannot seed {k} clusters")
    z = embed_dataset(model, dataset)
    return kmeans(z, k, seed=seed, restarts=restarts)


def _student_t_torch(z: torch.Tensor, m: torch.Tensor, alpha: float = ALPHA) -> torch.Tensor:
    d2 = ((z.unsqueeze(1) - m.unsqueeze(0)) ** 2).sum(dim=-1)
    s = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    return s / s.sum(dim=1, keepdim=True)


def _clustering_kl_torch(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    return (p * (torch.log(p) - torch.log(q))).sum()


def _reseed_empty_clusters(z: np.ndarray, m: torch.Tensor,
                           k: int) -> tuple[SoftAssignment, np.ndarray, tuple[int, ...]]:
    """Assignment with empty clusters re-seeded from the farthest embedded point."""
    reseeded: list[int] = []
    for _ in range(k + 1):
        m_np = m.detach().numpy()
        q = soft_assign(z, m_np, ALPHA)
        labels = assign_labels(q)
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        d2 = ((z[:, None, :] - m_np[None, :, :]) ** 2).sum(axis=2)
        nearest = d2.min(axis=1)
        with torch.no_grad():
            for j in empty:
                far = int(nearest.argmax())
                m[j] = torch.from_numpy(z[far].copy())
                nearest[far] = 0.0
                reseeded.append(int(j))
        log.warning("re-seeded empty cluster(s) %s from farthest points", list(empty))
    return q, labels, tuple(reseeded)


def joint_train(model: Vae, centroids: Centroids, dataset: Dataset,
                schedule: TrainSchedule,
                initial_state: TrainState | None = None) -> TrainState:
    """Joint refinement loop.

    Every ``update_interval`` iterations the whole dataset is embedded
    noise-free, the assignment and frequency-normalized target are recomputed,
    hard labels are re-assigned, and training stops if fewer than ``delta`` of
    them changed since the previous update. All other iterations take one SGD
    step on weight * L_c + (1 - weight) * L_n, updating encoder, decoder, and
    centroids together.
    """
    cvals = centroids.values if isinstance(centroids, Centroids) else np.asarray(centroids)
    k = cvals.shape[0]
    m = torch.tensor(np.array(cvals, dtype=np.float64), requires_grad=True)
    opt = torch.optim.SGD([
        {"params": list(model.parameters()), "weight_decay": schedule.weight_decay},
        {"params": [m], "weight_decay": 0.0},
    ], lr=schedule.base_lr)
    noise_gen = torch.Generator().manual_seed(schedule.seed + _JOINT_NOISE)
    stream = _epoch_stream(dataset, schedule.batch_size, schedule.seed + _JOINT_BATCH)

    if initial_state is not None:
        start = initial_state.iteration
        converged = initial_state.converged
        target = initial_state.last_target
        prev_labels = initial_state.last_labels
        history = list(initial_state.loss_history)
        updates = list(initial_state.update_log)
    else:
        start, converged, target, prev_labels = 0, False, None, None
        history, updates = [], []

    it = start
    while it < schedule.max_iterations and not converged:
        lr = lr_at(it, schedule)
        for group in opt.param_groups:
            group["lr"] = lr
        if it % schedule.update_interval == 0:
            z = embed_dataset(model, dataset)
            q, labels, reseeded = _reseed_empty_clusters(z, m, k)
            stats = ClusterStats.from_assignment(q, labels)
            target = modified_target(q, stats)
            full_kl = kl_clustering_loss(target, q) / dataset.n
            change = None
            if prev_labels is not None:
                change = label_change_fraction(prev_labels, labels)
                if change < schedule.delta:
                    converged = True
                    log.info("converged at iteration %d (label change %.6f < %g)",
                             it, change, schedule.delta)
            prev_labels = labels
            updates.append(UpdateRecord(it, full_kl, change, reseeded))
            history.append(LossRecord(it, full_kl, None, None, lr, change))
        else:
            if target is None:
                raise InvalidArgumentError(
                    "resumed mid-interval without a stored target distribution")
            batch = next(stream)
            x = torch.from_numpy(batch.images)
            out = model.encode(x)
            noise = torch.randn(out.mu.shape, generator=noise_gen, dtype=DTYPE)
            z = reparameterize(out, noise)
            x_hat = model.decode(z)
            recon = reconstruction_loss(x, x_hat)
            prior_kl = gaussian_prior_kl(out)
            l_n = recon + prior_kl
            q_b = _student_t_torch(z, m)
            p_b = torch.from_numpy(target.values[batch.indices])
            l_c = _clustering_kl_torch(p_b, q_b) / batch.n
            combined = total_loss(l_c, l_n, schedule.clustering_weight)
            _check_finite(it, lr, total=combined, l_c=l_c, l_n=l_n)
            opt.zero_grad()
            combined.backward()
            opt.step()
            history.append(LossRecord(it, float(l_c), float(l_n), float(combined), lr, None))
        it += 1

    return TrainState(
        iteration=it,
        model=model,
        centroids=Centroids(m.detach().numpy().copy()),
        last_target=target,
        last_labels=prev_labels,
        converged=converged,
        loss_history=history,
        update_log=updates,
    )


def _history_matrix(history: list[LossRecord]) -> np.ndarray:
    rows = np.full((len(history), 6), np.nan)
    for i, rec in enumerate(history):
        rows[i] = [rec.iteration,
                   np.nan if rec.l_c is None else rec.l_c,
                   np.nan if rec.l_r is None else rec.l_r,
                   np.nan if rec.total is None else rec.total,
                   rec.lr,
                   np.nan if rec.label_change is None else rec.label_change]
    return rows


def _history_from_matrix(rows: np.ndarray) -> list[LossRecord]:
    out = []
    for row in rows:
        vals = [None if math.isnan(v) else float(v) for v in row[1:]]
        out.append(LossRecord(int(row[0]), vals[0], vals[1], vals[2],
                              float(row[3]), vals[4]))
    return out


def save_state(state: TrainState, base, seed: int, extra: dict | None = None):
    """Persist the full training state: parameters, centroids, labels, target, history."""
    arrays = {f"param/{k}": v for k, v in state_arrays(state.model).items()}
    arrays["centroids"] = state.centroids.values
    arrays["history"] = _history_matrix(state.loss_history)
    if state.last_labels is not None:
        arrays["labels"] = state.last_labels
    if state.last_target is not None:
        arrays["target"] = state.last_target.values
    manifest = {
        "kind": "train_state",
        "arch": state.model.spec.to_manifest(),
        "seed": int(seed),
        "iteration": int(state.iteration),
        "converged": bool(state.converged),
        "target_variant": None if state.last_target is None else state.last_target.variant,
        "updates": [
            {"iteration": u.iteration, "clustering_loss": u.clustering_loss,
             "label_change": u.label_change, "reseeded": list(u.reseeded)}
            for u in state.update_log
        ],
    }
    if extra:
        manifest.update(extra)
    return write_blob(base, arrays, manifest)


def load_state(base) -> tuple[TrainState, dict]:
    """Load a training state written by :func:`save_state`, verifying integrity."""
    from .model import ArchitectureSpec

    arrays, manifest = read_blob(base)
    spec = ArchitectureSpec.from_manifest(manifest["arch"])
    model = Vae(spec)
    load_state_arrays(model, {k[len("param/"):]: v for k, v in arrays.items()
                              if k.startswith("param/")})
    target = None
    if "target" in arrays:
        target = TargetDistribution(arrays["target"], manifest["target_variant"])
    labels = arrays["labels"].astype(np.int64) if "labels" in arrays else None
    state = TrainState(
        iteration=int(manifest["iteration"]),
        model=model,
        centroids=Centroids(arrays["centroids"]),
        last_target=target,
        last_labels=labels,
        converged=bool(manifest["converged"]),
        loss_history=_history_from_matrix(arrays["history"]),
        update_log=[UpdateRecord(u["iteration"], u["clustering_loss"],
                                 u["label_change"], tuple(u["reseeded"]))
                    for u in manifest.get("updates", [])],
    )
    return state, manifest


def write_loss_csv(path, history: list[LossRecord]) -> None:
    """Loss history as CSV with the stable header; empty cells for absent values."""

    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in history:
            fh.write(",".join([str(rec.iteration), fmt(rec.l_c), fmt(rec.l_r),
                               fmt(rec.total), fmt(rec.lr), fmt(rec.label_change)]) + "\n")
