"""Two-player dissimilarity training.

Each minibatch runs two updates on the same data: first the per-tap 1x1
projection takes an SGD step toward *higher* similarity between its
approximation of the new model's representation and the (detached) real one;
then the new model takes a step on task loss plus the lambda-weighted
similarity against the freshly updated, now-frozen projections. Frozen
trained models only ever run forward, outside any tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn, repsim
from . import tensor as T
from .data import AugmentPolicy, Dataset, batches, num_batches
from .repsim import Metric, Representation
from .tensor import NonFiniteError, Tensor

STATS_SCHEMA_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the last recorded step entries as diagnostics."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class DissimConfig:
    metric: Metric = Metric.EXPVAR
    lambda_: float = 1.0
    tap_ids: list[int] = field(default_factory=list)
    proj_lr: float = 0.01
    proj_steps: int = 1
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        self.metric = Metric.parse(self.metric)
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.lambda_ > 0 and not self.tap_ids:
            raise ValueError("tap_ids must be non-empty when lambda > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.proj_steps < 1:
            raise ValueError("epochs, batch_size and proj_steps must be >= 1")


@dataclass
class StepEntry:
    step: int
    epoch: int
    task_loss: float
    lr: float
    sim: dict[int, float] = field(default_factory=dict)
    proj_obj: dict[int, float] = field(default_factory=dict)
    # per-tap summary of per-channel activation variance, to make the
    # "dissimilar by rescaling?" question inspectable from the logs
    rep_var: dict[int, dict[str, float]] = field(default_factory=dict)


@dataclass
class TrainStats:
    model_name: str
    steps: list[StepEntry] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    projection_shapes: dict[int, tuple[int, int]] = field(default_factory=dict)  # tap -> (c_out, c_in)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.steps:
                rec = {"schema": STATS_SCHEMA_VERSION, "kind": "step", **asdict(s)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for epoch, acc in enumerate(self.val_accuracy):
                rec = {"schema": STATS_SCHEMA_VERSION, "kind": "epoch",
                       "epoch": epoch, "val_accuracy": acc}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class Projection:
    """1x1 linear map from concatenated trained-model channels to the new model's."""

    weight: Tensor  # C_out x C_in_total x 1 x 1
    bias: Tensor    # C_out
    tap_id: int

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def make_projection(channels_per_trained_model: list[int], c_out: int, seed: int,
                    tap_id: int = 0) -> Projection:
    if not channels_per_trained_model:
        raise ValueError("need at least one trained model's channel count")
    if any(c < 1 for c in channels_per_trained_model) or c_out < 1:
        raise ValueError("channel counts must be positive")
    c_in = int(sum(channels_per_trained_model))
    rng = np.random.default_rng([seed, tap_id])
    # near-zero init: the adversary starts at R^2 ~ 0 where the CELU wrapping
    # still passes gradient; a fan-in-scaled init is born into its saturated tail
    weight = Tensor((rng.standard_normal((c_out, c_in, 1, 1)) * 0.01).astype(np.float32),
                    requires_grad=True)
    bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
    return Projection(weight, bias, tap_id)


def apply_projection(proj: Projection, z_t_arrays: list[np.ndarray]) -> np.ndarray:
    """Numpy-only projection forward: used where its output must be a constant."""
    z = np.concatenate(z_t_arrays, axis=1)
    w2 = proj.weight.data.reshape(proj.weight.shape[0], proj.weight.shape[1])
    b, _, h, w = z.shape
    out = np.matmul(w2, z.reshape(b, z.shape[1], h * w)).reshape(b, -1, h, w)
    return out + proj.bias.data.reshape(1, -1, 1, 1)


def _projection_forward(proj: Projection, z_t_arrays: list[np.ndarray]) -> Tensor:
    """Tape-recorded projection forward: gradients flow into weight/bias only."""
    z = Tensor(np.concatenate(z_t_arrays, axis=1))
    out = T.conv2d(z, proj.weight, stride=1, padding=0)
    return out + T.reshape(proj.bias, (1, proj.bias.shape[0], 1, 1))


def _similarity(metric: Metric, z_u, z_hat) -> Tensor:
    if metric is Metric.L2CORR:
        return repsim.l2corr(z_u, z_hat)
    if metric is Metric.EXPVAR:
        return repsim.expvar(z_u, z_hat)
    return repsim.lincka_batch(z_u, z_hat)


def _rep_array(z) -> np.ndarray:
    if isinstance(z, Representation):
        return np.asarray(z.values.data)
    if isinstance(z, Tensor):
        return np.asarray(z.data)
    return np.asarray(z)


def dissim_loss(z_u, z_t_list: list, proj: Projection, metric, lambda_: float):
    """Similarity of z_u to the projection of the frozen reps, scaled by lambda.

    Gradient flows into z_u only; the projection output and the frozen reps
    are constants here. For the subspace metric the projection is bypassed
    and similarity is taken against the concatenated frozen reps directly.
    """
    metric = Metric.parse(metric)
    z_t_arrays = [_rep_array(z) for z in z_t_list]
    if metric is Metric.LINCKA:
        target = Tensor(np.concatenate(z_t_arrays, axis=1))
    else:
        if sum(a.shape[1] for a in z_t_arrays) != proj.in_channels:
            raise T.ShapeError("frozen-rep channel sum does not match projection input")
        target = Tensor(apply_projection(proj, z_t_arrays))
    sim = _similarity(metric, z_u, target)
    return sim * float(lambda_), sim.item()


def projection_step(proj: Projection, opt: nn.SGD, metric: Metric,
                    z_u_const: np.ndarray, z_t_arrays: list[np.ndarray],
                    lr: float) -> float:
    """One adversary step: maximize similarity w.r.t. projection parameters."""
    with T.Tape() as tape:
        z_hat = _projection_forward(proj, z_t_arrays)
        obj = T.neg(_similarity(metric, Tensor(z_u_const), z_hat))
    grads = tape.backward(obj)
    opt.step(grads, lr)
    return obj.item()


def train_step(model: nn.Model, frozen: list[nn.Model], projs: dict[int, Projection],
               batch, cfg: DissimConfig, opt: nn.SGD,
               proj_opts: dict[int, nn.SGD] | None, lr: float,
               step: int = 0, epoch: int = 0) -> StepEntry:
    """One two-player update on one batch; see module docstring for the order."""
    xb, yb = batch
    x = Tensor(np.asarray(xb, dtype=np.float32))
    regularize = bool(frozen) and bool(cfg.tap_ids)
    tap_ids = list(cfg.tap_ids) if regularize else []

    # frozen models run forward only, outside any tape
    z_t: dict[int, list[np.ndarray]] = {t: [] for t in tap_ids}
    for fm in frozen:
        _, reps = fm.forward_with_taps(x, tap_ids, training=False)
        for t in tap_ids:
            z_t[t].append(np.asarray(reps[t].values.data))

    entry = StepEntry(step=step, epoch=epoch, task_loss=math.nan, lr=lr)
    with T.Tape() as tape:
        logits, reps_u = model.forward_with_taps(x, tap_ids, training=True)

        # adversary first: each tap's projection chases the detached representation
        for t in tap_ids:
            z_u_const = np.asarray(reps_u[t].values.data)
            var = z_u_const.transpose(1, 0, 2, 3).reshape(z_u_const.shape[1], -1).var(axis=1)
            entry.rep_var[t] = {"mean": float(var.mean()), "min": float(var.min()),
                                "max": float(var.max())}
            for _ in range(cfg.proj_steps):
                entry.proj_obj[t] = projection_step(
                    projs[t], proj_opts[t], cfg.metric, z_u_const, z_t[t], cfg.proj_lr)

        loss = T.cross_entropy(logits, yb)
        entry.task_loss = loss.item()
        if regularize and cfg.lambda_ > 0:
            sim_terms = []
            for t in tap_ids:
                term, sim_value = dissim_loss(reps_u[t], z_t[t], projs[t],
                                              cfg.metric, cfg.lambda_)
                entry.sim[t] = sim_value
                sim_terms.append(term)
            penalty = sim_terms[0]
            for term in sim_terms[1:]:
                penalty = penalty + term
            loss = loss + penalty * float(1.0 / len(sim_terms))
        elif regularize:
            for t in tap_ids:  # record similarity even when it carries no weight
                _, entry.sim[t] = dissim_loss(reps_u[t], z_t[t], projs[t], cfg.metric, 0.0)
        grads = tape.backward(loss)
    opt.step(grads, lr)
    return entry


def evaluate_accuracy(model: nn.Model, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    total = 0
    for xb, yb in batches(ds, min(batch_size, len(ds)), drop_small=False):
        logits = model.forward(Tensor(xb), training=False)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        total += len(yb)
    return correct / total


def _make_optimizer(model: nn.Model, cfg: DissimConfig) -> nn.SGD:
    return nn.SGD(model.named_params(), momentum=cfg.momentum,
                  nesterov=cfg.nesterov, weight_decay=cfg.weight_decay)


def train_model(model: nn.Model, frozen: list[nn.Model], cfg: DissimConfig,
                train_ds: Dataset, val_ds: Dataset | None = None,
                policy: AugmentPolicy | None = None,
                shuffle_seed: int | None = None) -> TrainStats:
    """Full training of one model (the regularized path when ``frozen`` is non-empty)."""
    stats = TrainStats(model_name=model.name)
    opt = _make_optimizer(model, cfg)
    projs: dict[int, Projection] = {}
    proj_opts: dict[int, nn.SGD] = {}
    if frozen and cfg.tap_ids:
        tap_channels = {t.id: t.channels for t in model.taps}
        for t in cfg.tap_ids:
            per_model = [dict((tp.id, tp.channels) for tp in fm.taps)[t] for fm in frozen]
            projs[t] = make_projection(per_model, tap_channels[t], seed=cfg.seed, tap_id=t)
            proj_opts[t] = nn.SGD(projs[t].params(), momentum=0.0, nesterov=False,
                                  weight_decay=0.0)
            stats.projection_shapes[t] = (projs[t].weight.shape[0], projs[t].in_channels)

    seed = cfg.seed if shuffle_seed is None else shuffle_seed
    total_steps = cfg.epochs * num_batches(len(train_ds), cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        for batch in batches(train_ds, cfg.batch_size, seed, policy, epoch):
            lr = nn.cosine_lr(step, total_steps, cfg.base_lr)
            try:
                entry = train_step(model, frozen, projs, batch, cfg, opt,
                                   proj_opts, lr, step=step, epoch=epoch)
            except NonFiniteError as exc:
                recent = [asdict(s) for s in stats.steps[-5:]]
                raise TrainingDiverged(
                    f"{model.name}: non-finite loss at step {step} (epoch {epoch}): {exc}",
                    recent) from exc
            stats.steps.append(entry)
            step += 1
        if val_ds is not None:
            stats.val_accuracy.append(evaluate_accuracy(model, val_ds))
    return stats


def train_sequence(model_cfg: nn.ModelConfig | str, cfg: DissimConfig, n_models: int,
                   train_ds: Dataset, val_ds: Dataset | None = None,
                   policy: AugmentPolicy | None = None):
    """Sequentially train ``n_models``; model 1 unregularized, the rest against
    all predecessors. Model i trains with seed cfg.seed + i (zero-based)."""
    if n_models < 1:
        raise ValueError("n_models must be >= 1")
    models: list[nn.Model] = []
    all_stats: list[TrainStats] = []
    for i in range(n_models):
        seed_i = cfg.seed + i
        member_cfg = DissimConfig(**{**asdict_config(cfg), "seed": seed_i})
        model = nn.build_model(model_cfg, seed_i, name=f"model_{i + 1:03d}-seed{seed_i}")
        stats = train_model(model, list(models), member_cfg, train_ds, val_ds, policy)
        models.append(model)
        all_stats.append(stats)
    return models, all_stats


def asdict_config(cfg: DissimConfig) -> dict:
    d = asdict(cfg)
    d["metric"] = cfg.metric.value
    return d
