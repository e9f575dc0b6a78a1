"""Epoch training with gated updates, step schedules and freeze policies."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neq import data as data_mod
from neq.engine import backward
from neq.flops import bprop_flops, epoch_summary, layer_costs
from neq.layers import build_model, save_checkpoint
from neq.tracker import EquilibriumTracker, TrackerConfig

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _check_grads(params, grads, mask):
    for (lid, role), w in params.items():
        frozen = mask.get(lid) if mask is not None else None
        active = np.arange(w.shape[0]) if frozen is None else np.flatnonzero(~frozen)
        ng = grads.get((lid, role))
        if ng is None:
            if active.size:
                raise TrainingError(f"missing gradient for non-frozen neurons of {lid}/{role}")
            continue
        if not np.array_equal(ng.rows, active):
            raise TrainingError(f"gradient rows of {lid}/{role} do not match the mask")
        if ng.values.shape[1:] != w.shape[1:]:
            raise TrainingError(f"gradient shape mismatch for {lid}/{role}")


class SGD:
    """Momentum SGD with L2 weight decay added to the gradient.

    ``buf <- momentum * buf + (g + wd * w)``, ``w <- w - lr * buf``, applied to
    non-frozen rows only.
    """

    kind = "sgd"

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=5e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, mask=None):
        _check_grads(self.params, grads, mask)
        for key, ng in grads.items():
            w, buf, rows = self.params[key], self.buffers[key], ng.rows
            dt = w.dtype.type
            wr = w[rows]
            g = ng.values + dt(self.weight_decay) * wr
            b = dt(self.momentum) * buf[rows] + g
            buf[rows] = b
            w[rows] = wr - dt(self.lr) * b


class Adam:
    """Bias-corrected Adam with L2 weight decay; step counters are per neuron."""

    kind = "adam"

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.steps = {k: np.zeros(v.shape[0], dtype=np.int64) for k, v in params.items()}

    def step(self, grads, mask=None):
        _check_grads(self.params, grads, mask)
        for key, ng in grads.items():
            w, rows = self.params[key], ng.rows
            dt = w.dtype.type
            wr = w[rows]
            g = ng.values + dt(self.weight_decay) * wr
            m = dt(self.beta1) * self.m[key][rows] + dt(1 - self.beta1) * g
            v = dt(self.beta2) * self.v[key][rows] + dt(1 - self.beta2) * g * g
            self.m[key][rows] = m
            self.v[key][rows] = v
            self.steps[key][rows] += 1
            t = self.steps[key][rows].reshape((-1,) + (1,) * (w.ndim - 1)).astype(np.float64)
            c1 = (1.0 - self.beta1 ** t).astype(w.dtype)
            c2 = (1.0 - self.beta2 ** t).astype(w.dtype)
            w[rows] = wr - dt(self.lr) * (m / c1) / (np.sqrt(v / c2) + dt(self.eps))


def sgd_step(params, grads, mask, lr, momentum, weight_decay, buffers):
    """Functional momentum-SGD step over ``params`` with persistent ``buffers``."""
    opt = SGD(params, lr, momentum, weight_decay)
    opt.buffers = buffers
    opt.step(grads, mask)


def make_optimizer(cfg, params):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


# ---------------------------------------------------------------------------
# schedule and masks
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    lr: float
    milestones: list = field(default_factory=list)

    def __post_init__(self):
        epochs = [m for m, _ in self.milestones]
        if any(a >= b for a, b in zip(epochs, epochs[1:])):
            raise ValueError("milestones must be strictly increasing")

    def lr_at(self, epoch):
        """Learning rate used during ``epoch`` (1-based); divisors apply after their milestone."""
        lr = self.lr
        for m, div in self.milestones:
            if epoch > m:
                lr = lr / div
        return lr


def empty_mask(model):
    return {l.layer_id: np.zeros(l.neuron_count, dtype=bool) for l in model.parameterized_layers()}


def stochastic_mask(model, p, epoch_seed):
    """Freeze each tracked neuron independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    rng = np.random.default_rng(epoch_seed)
    mask = empty_mask(model)
    for layer in model.tracked_layers():
        mask[layer.layer_id] = rng.random(layer.neuron_count) < p
    return mask


def complete_mask(model, partial):
    """Fill untracked parameterized layers with all-updated vectors."""
    mask = empty_mask(model)
    for lid, frozen in partial.items():
        mask[lid] = np.asarray(frozen, dtype=bool).copy()
    return mask


def count_updated(model, mask):
    tracked = model.tracked_layers()
    total = sum(l.neuron_count for l in tracked)
    frozen = sum(int(np.count_nonzero(mask[l.layer_id])) for l in tracked)
    return total - frozen, total


# ---------------------------------------------------------------------------
# mask replay files
# ---------------------------------------------------------------------------

REPLAY_HEADER = "# epoch,layer_id,neuron_index"


def write_mask_replay(masks, path):
    """One ``epoch,layer_id,neuron_index`` line per frozen neuron; ``masks`` maps epoch -> mask."""
    lines = [REPLAY_HEADER]
    for epoch in sorted(masks):
        for lid, frozen in masks[epoch].items():
            for i in np.flatnonzero(frozen):
                lines.append(f"{epoch},{lid},{int(i)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask_replay(path, model):
    """Parse a replay file into epoch -> full mask (unlisted epochs are all-updated)."""
    masks = {}
    known = {l.layer_id: l.neuron_count for l in model.parameterized_layers()}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected epoch,layer_id,neuron_index")
        epoch, lid, idx = int(parts[0]), parts[1], int(parts[2])
        if lid not in known or not 0 <= idx < known[lid]:
            raise ValueError(f"{path}:{lineno}: unknown neuron {lid}[{idx}]")
        masks.setdefault(epoch, empty_mask(model))[lid][idx] = True
    return masks


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    bprop_flops_mean: float
    bprop_flops_std: float
    updated_neurons: int
    updated_fraction: float
    train_loss: float
    test_accuracy: float
    lr: float
    wall_seconds: float = 0.0


@dataclass
class TrainResult:
    metrics: list
    model: object
    masks: dict
    baseline_flops: float
    iteration_flops: list


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def load_data(cfg):
    """(train, probe, test) per config, normalized with train statistics."""
    heldout = None
    if cfg.source == "synthetic":
        full = data_mod.gen_synthetic(cfg.kind, cfg.n, cfg.noise, cfg.data_seed,
                                      image_size=cfg.image_size, classes=cfg.classes)
    else:
        full = data_mod.load_idx_dataset(cfg.train_images, cfg.train_labels)
        if cfg.test_images:
            heldout = data_mod.load_idx_dataset(cfg.test_images, cfg.test_labels)
            k = max(full.num_classes, heldout.num_classes)
            full.num_classes = heldout.num_classes = k
    split_seed = np.random.SeedSequence([cfg.seed, 1])
    train, probe, test = data_mod.split_probe(full, cfg.probe_size, split_seed,
                                              cfg.test_fraction, heldout)
    if cfg.normalize and len(train):
        mean, std = data_mod.channel_stats(train.x)
        for ds in (train, probe, test):
            ds.x = data_mod.normalize(ds.x, mean, std)
    dtype = np.dtype(cfg.precision)
    for ds in (train, probe, test):
        ds.x = ds.x.astype(dtype)
    return train, probe, test


def model_for(cfg, train):
    opts = {}
    if cfg.arch == "smallcnn":
        opts["batchnorm"] = cfg.batchnorm
    if cfg.arch == "smallresnet":
        opts["blocks"] = cfg.blocks
    widths = cfg.widths
    return build_model(cfg.arch, train.x.shape[1:], train.num_classes, widths,
                       seed=int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0]),
                       dtype=np.dtype(cfg.precision), **opts)


def evaluate(model, ds, batch_size=1000):
    if len(ds) == 0:
        return float("nan")
    pred = model.predict(ds.x, batch_size)
    return float(np.mean(pred == ds.y))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def run_training(cfg, datasets=None, replay=None, on_epoch=None, on_batch=None):
    """Train per ``cfg``; returns a :class:`TrainResult`.

    Each epoch: train with the current mask, evaluate, let the policy choose
    the next mask, and log one :class:`MetricsRecord`.  ``replay`` maps epoch
    -> mask and overrides the policy (the ``replay`` policy reads it from
    ``cfg.replay_file``).  ``on_epoch(record, model, mask)`` runs after each
    epoch; ``on_batch(epoch, model, xb, yb, mask, grads, optimizer)`` runs
    after each backward pass, before the update.
    """
    train, probe, test = datasets if datasets is not None else load_data(cfg)
    model = model_for(cfg, train)
    if train.x.shape[0] < cfg.batch_size:
        raise TrainingError(f"training set of {len(train)} is smaller than one batch")
    if train.y.size and train.y.max() >= model.num_classes:
        raise TrainingError("labels exceed the model's class count")
    if cfg.policy == "replay" and replay is None:
        replay = read_mask_replay(cfg.replay_file, model)

    opt = make_optimizer(cfg, model.params)
    schedule = Schedule(cfg.lr, cfg.schedule_pairs())
    costs = layer_costs(model, cfg.optimizer)
    baseline = bprop_flops(model, costs, empty_mask(model), cfg.batch_size, cfg.include_optimizer_flops)
    tracker = EquilibriumTracker(TrackerConfig(cfg.mu_eq, cfg.epsilon, cfg.probe_size)) \
        if cfg.policy == "neq" else None

    seeds = np.random.SeedSequence([cfg.seed, 2])
    shuffle_rng = np.random.default_rng(seeds)

    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    diag_dir = None
    if out_dir is not None and cfg.diagnostics and tracker is not None:
        diag_dir = out_dir / "diagnostics"
        diag_dir.mkdir(parents=True, exist_ok=True)

    def policy_mask(epoch):
        if replay is not None:
            return complete_mask(model, replay.get(epoch, {}))
        if cfg.policy == "stochastic":
            return stochastic_mask(model, cfg.p, np.random.SeedSequence([cfg.seed, 3, epoch]))
        return empty_mask(model)

    # NEq and none start fully updated; stochastic masks apply from epoch 1
    mask = policy_mask(1)
    masks = {}
    metrics = []
    all_iter_flops = []
    n_batches = len(train) // cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = schedule.lr_at(epoch)
        opt.lr = lr
        masks[epoch] = mask
        order = shuffle_rng.permutation(len(train))
        losses = []
        iter_flops = []
        step_flops = bprop_flops(model, costs, mask, cfg.batch_size, cfg.include_optimizer_flops)
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, yb = train.x[idx], train.y[idx]
            if cfg.hflip:
                flip = shuffle_rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], xb[..., ::-1], xb)
            rec = model.loss(xb, yb, training=True, frozen=mask)
            loss = float(rec.output)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = backward(rec, 1.0, mask)
            if on_batch is not None:
                on_batch(epoch, model, xb, yb, mask, grads, opt)
            opt.step(grads, mask)
            losses.append(loss)
            iter_flops.append(step_flops)
        mean_flops, std_flops = epoch_summary(iter_flops)
        all_iter_flops.extend(iter_flops)
        acc = evaluate(model, test)
        updated, total = count_updated(model, mask)

        if replay is not None or cfg.policy in ("none", "stochastic"):
            next_mask = policy_mask(epoch + 1)
        else:
            partial, diag = tracker.step(model, probe.x, epoch)
            next_mask = complete_mask(model, partial)
            if diag_dir is not None:
                diag.write_csv(diag_dir / f"epoch_{epoch:04d}.csv")

        rec_m = MetricsRecord(
            epoch=epoch,
            bprop_flops_mean=mean_flops,
            bprop_flops_std=std_flops,
            updated_neurons=updated,
            updated_fraction=updated / total if total else 1.0,
            train_loss=float(np.mean(losses)),
            test_accuracy=acc,
            lr=lr,
            wall_seconds=time.perf_counter() - t0,
        )
        metrics.append(rec_m)
        logger.info("epoch %d loss %.4f acc %.4f updated %.3f flops %.4g",
                    epoch, rec_m.train_loss, acc, rec_m.updated_fraction, mean_flops)
        if on_epoch is not None:
            on_epoch(rec_m, model, mask)
        mask = next_mask

    if out_dir is not None:
        from neq.metrics import write_metrics, write_timing
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out_dir / "metrics.csv")
        write_timing(metrics, out_dir / "timing.csv")
        write_mask_replay(masks, out_dir / "masks.txt")
        if cfg.checkpoint:
            save_checkpoint(model, out_dir / "model")
    return TrainResult(metrics, model, masks, baseline, all_iter_flops)
