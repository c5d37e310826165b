"""Losses, adversarial training loop, learning-rate schedule and gradient verification."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import infer
from .core import NumericError, PlanWindow, ShapeError, ValidationError
from .model import PlannerModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    initial_lr: float = 7e-4
    decay_factor: float = 0.65
    decay_every: int = 40
    batch_size: int = 32
    lambda_c: float = 1.0
    lambda_ca: float = 1.0
    lambda_adv: float = 0.1
    critic_steps: int = 1
    optimizer: str = "sgd"
    momentum: float = 0.9
    contrastive_temperature: float = 1.0
    val_samples: int = 64
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("epochs", "initial_lr", "decay_every", "batch_size", "critic_steps",
                     "val_samples", "contrastive_temperature"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if not 0 < self.decay_factor < 1:
            problems.append("decay_factor must lie in (0, 1)")
        for name in ("lambda_c", "lambda_ca", "lambda_adv"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if problems:
            raise ValidationError(problems)


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_ca: float
    l_gen_adv: float
    l_critic: float
    total: float


def learning_rate(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    return config.initial_lr * config.decay_factor ** (epoch // config.decay_every)


# ---------------------------------------------------------------- losses

def contrastive_loss(context: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor,
                     temperature: float = 1.0) -> torch.Tensor:
    """-sum_t log softmax over {positive_t} + negatives of (caption . context_t).

    context, positives: (M, d) unit vectors; negatives: (P, d) pool shared by all tokens.
    """
    if context.shape != positives.shape:
        raise ShapeError(f"context {tuple(context.shape)} vs positives {tuple(positives.shape)}")
    pos = (context * positives).sum(-1, keepdim=True)
    neg = context @ negatives.T if negatives.numel() else context.new_zeros(context.shape[0], 0)
    logits = torch.cat([pos, neg], dim=1) / temperature
    return -(logits[:, 0] - torch.logsumexp(logits, dim=1)).sum()


def batch_contrastive_loss(context: torch.Tensor, captions: torch.Tensor,
                           temperature: float = 1.0) -> torch.Tensor:
    """In-batch version: context and captions are (B, 2, d); every other caption in
    the batch is a negative.  Summed over the two tokens, averaged over windows."""
    B = context.shape[0]
    cxt = context.reshape(2 * B, -1)
    cap = captions.reshape(2 * B, -1)
    logits = cxt @ cap.T / temperature
    target = torch.arange(2 * B)
    return F.cross_entropy(logits, target, reduction="sum") / B


def cross_entropy_loss(logits: torch.Tensor, gt_actions: torch.Tensor) -> torch.Tensor:
    """Summed over steps, averaged over the batch (if any)."""
    if logits.dim() == 2:
        logits, gt_actions = logits.unsqueeze(0), gt_actions.reshape(1, -1)
    if logits.shape[:2] != gt_actions.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs targets {tuple(gt_actions.shape)}")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, gt_actions.long().unsqueeze(-1)).squeeze(-1)
    return -picked.sum(dim=1).mean()


def _clamped_log(p):
    return torch.log(p.clamp(PROB_CLAMP, 1 - PROB_CLAMP))


def critic_loss_from_scores(real_scores, fake_scores) -> torch.Tensor:
    return -_clamped_log(real_scores).mean() - _clamped_log(1 - fake_scores).mean()


def critic_loss(model: PlannerModel, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of the critic; ``fake`` is detached from the generator."""
    return critic_loss_from_scores(model.critic_forward(real), model.critic_forward(fake.detach()))


def generator_adv_loss_from_scores(fake_scores) -> torch.Tensor:
    return -_clamped_log(fake_scores).mean()


def generator_adv_loss(model: PlannerModel, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective."""
    return generator_adv_loss_from_scores(model.critic_forward(fake))


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    start_obs: torch.Tensor
    goal_obs: torch.Tensor
    start_cap: torch.Tensor | None
    goal_cap: torch.Tensor | None
    actions: torch.Tensor

    @property
    def size(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @classmethod
    def from_windows(cls, windows: Sequence[PlanWindow], dtype=torch.float32,
                     with_captions: bool = True) -> "Batch":
        if not windows:
            raise ValidationError("batch must be nonempty")
        T = windows[0].horizon
        if any(w.horizon != T for w in windows):
            raise ShapeError("all windows of a batch must share a horizon")

        def stack(name):
            return torch.as_tensor(np.stack([getattr(w, name) for w in windows]), dtype=dtype)

        return cls(
            start_obs=stack("start_obs"),
            goal_obs=stack("goal_obs"),
            start_cap=stack("start_caption_emb") if with_captions else None,
            goal_cap=stack("goal_caption_emb") if with_captions else None,
            actions=torch.as_tensor(np.array([w.actions for w in windows]), dtype=torch.long),
        )

    def subset(self, idx) -> "Batch":
        pick = (lambda t: None if t is None else t[idx])
        return Batch(pick(self.start_obs), pick(self.goal_obs), pick(self.start_cap),
                     pick(self.goal_cap), self.actions[idx])


def one_hot_sequences(actions: torch.Tensor, n: int, dtype) -> torch.Tensor:
    return F.one_hot(actions, n).to(dtype)


def uses_captions(model: PlannerModel, config: TrainConfig) -> bool:
    return model.config.use_context and config.lambda_c > 0


def generator_losses(model: PlannerModel, batch: Batch, z: torch.Tensor, config: TrainConfig):
    """(l_c, l_ca, l_gen_adv) as tensors; l_c is a zero tensor when captions are not used."""
    logits, context = model(batch.start_obs, batch.goal_obs, z, batch.horizon)
    l_ca = cross_entropy_loss(logits, batch.actions)
    if uses_captions(model, config):
        caps = torch.stack([model.embed_caption(batch.start_cap), model.embed_caption(batch.goal_cap)], 1)
        l_c = batch_contrastive_loss(context, caps, config.contrastive_temperature)
    else:
        l_c = logits.new_zeros(())
    fake = torch.softmax(logits, dim=-1)
    l_adv = generator_adv_loss_from_scores(model.critic_forward(fake, validate=False))
    return l_c, l_ca, l_adv, fake


def _check_finite(**terms):
    for name, value in terms.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss term {name} = {value}")


class Trainer:
    """Owns the model and both optimizers; the single writer of the parameters."""

    def __init__(self, model: PlannerModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.gen_opt = self._make_opt(model.generator_parameters())
        self.critic_opt = self._make_opt(model.critic_parameters())
        self.set_lr(config.initial_lr)

    def _make_opt(self, params):
        c = self.config
        if c.optimizer == "adam":
            return torch.optim.Adam(params, lr=c.initial_lr)
        return torch.optim.SGD(params, lr=c.initial_lr, momentum=c.momentum)

    def set_lr(self, lr: float):
        for opt in (self.gen_opt, self.critic_opt):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(self, batch: Batch, generator: torch.Generator) -> LossBreakdown:
        """One critic update followed by one generator update."""
        model, c = self.model, self.config
        model.train()
        z = torch.randn(batch.size, model.config.z_dim, generator=generator,
                        dtype=torch.float64).to(model.dtype)
        real = one_hot_sequences(batch.actions, model.config.num_actions, model.dtype)

        with torch.no_grad():
            logits, _ = model(batch.start_obs, batch.goal_obs, z, batch.horizon)
            fake = torch.softmax(logits, dim=-1)
        for _ in range(c.critic_steps):
            self.critic_opt.zero_grad(set_to_none=True)
            l_critic = critic_loss_from_scores(model.critic_forward(real, validate=False),
                                               model.critic_forward(fake, validate=False))
            _check_finite(l_critic=l_critic)
            l_critic.backward()
            self.critic_opt.step()

        self.gen_opt.zero_grad(set_to_none=True)
        l_c, l_ca, l_adv, _ = generator_losses(model, batch, z, c)
        _check_finite(l_c=l_c, l_ca=l_ca, l_gen_adv=l_adv)
        total = c.lambda_ca * l_ca + c.lambda_c * l_c + c.lambda_adv * l_adv
        total.backward()
        self.gen_opt.step()
        for p in model.critic_parameters():
            p.grad = None
        for name, p in model.named_parameters():
            if not torch.all(torch.isfinite(p)):
                raise NumericError(f"parameter {name} became non-finite")
        return LossBreakdown(*(float(x.detach()) for x in (l_c, l_ca, l_adv, l_critic, total)))

    def optimizer_arrays(self) -> dict:
        out = {}
        for tag, opt in (("gen", self.gen_opt), ("critic", self.critic_opt)):
            for i, (p, state) in enumerate(((p, opt.state.get(p, {})) for g in opt.param_groups
                                            for p in g["params"])):
                for k, v in sorted(state.items()):
                    out[f"{tag}.{i}.{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
        return out

    def load_optimizer_arrays(self, arrays: dict):
        for tag, opt in (("gen", self.gen_opt), ("critic", self.critic_opt)):
            params = [p for g in opt.param_groups for p in g["params"]]
            for i, p in enumerate(params):
                prefix = f"{tag}.{i}."
                state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
                         if k.startswith(prefix)}
                if state:
                    if "step" in state:
                        state["step"] = state["step"].to(torch.float32)
                    opt.state[p] = {k: (v.to(p.dtype) if k != "step" else v) for k, v in state.items()}


def train_step(trainer: Trainer, batch: Batch, seed: int) -> LossBreakdown:
    return trainer.train_step(batch, torch.Generator().manual_seed(int(seed)))


# ---------------------------------------------------------------- fit

@dataclass
class FitResult:
    model: PlannerModel
    best_model: PlannerModel
    curve: list
    best_epoch: int
    best_val_sr: float


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(epoch))


def _epoch_batches(train_idx_by_T: dict, batch_size: int, seed: int, epoch: int):
    rng = np.random.default_rng([seed, epoch])
    batches = []
    for T in sorted(train_idx_by_T):
        idx = train_idx_by_T[T]
        perm = [idx[i] for i in rng.permutation(len(idx))]
        batches.extend(perm[i:i + batch_size] for i in range(0, len(perm), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def validation_sr(model: PlannerModel, windows: Sequence[PlanWindow], A, K: int, seed: int) -> float:
    from .metrics import success_rate, canonical_order
    model.eval()
    ordered = canonical_order(windows)
    decoded, gts = [], []
    for T in sorted({w.horizon for w in ordered}):
        ws = [w for w in ordered if w.horizon == T]
        d, _, _ = infer.plan_many(model, ws, K, A, seed)
        decoded.extend(d)
        gts.extend(w.actions for w in ws)
    # mixed horizons: score per sample, not as a rectangular array
    hits = sum(tuple(p) == tuple(g) for p, g in zip(decoded, gts))
    return 100.0 * hits / len(gts)


def fit(model: PlannerModel, train: Sequence[PlanWindow], val: Sequence[PlanWindow],
        config: TrainConfig, checkpoint: str | Path | None = None,
        loss_curve: str | Path | None = None, resume: bool = False,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train for ``config.epochs`` epochs and keep the model with the best validation SR.

    Checkpoints: ``checkpoint`` holds the best-on-validation model; a sibling
    ``*.last`` file holds the latest state (with optimizer buffers) for resuming.
    """
    if not train or not val:
        raise ValidationError("fit needs nonempty train and validation sets")
    n = model.config.num_actions
    A = infer.estimate_transition([w.actions for w in train], n)
    read_captions = uses_captions(model, config)
    data = Batch.from_windows
    by_T: dict[int, list[int]] = {}
    for i, w in enumerate(train):
        by_T.setdefault(w.horizon, []).append(i)
    cached = {T: data([train[i] for i in idx], model.dtype, read_captions) for T, idx in by_T.items()}
    pos_in_T = {i: (T, j) for T, idx in by_T.items() for j, i in enumerate(idx)}

    trainer = Trainer(model, config)
    curve: list[dict] = []
    best_key = (-1.0, 0.0)
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    start_epoch = 0
    last_path = _last_path(checkpoint) if checkpoint else None
    if resume and last_path and last_path.exists():
        loaded, meta, extra = load_checkpoint(last_path)
        model.load_state_dict(loaded.state_dict())
        trainer.load_optimizer_arrays(extra)
        start_epoch = int(meta["epoch"])
        curve = list(meta.get("curve", []))
        best_key = tuple(meta.get("best_key", best_key))
        best_epoch = int(meta.get("best_epoch", -1))
        if Path(checkpoint).exists():
            best_state = copy.deepcopy(load_checkpoint(checkpoint)[0].state_dict())
        log.info("resuming at epoch %d", start_epoch)

    for epoch in range(start_epoch, config.epochs):
        lr = learning_rate(epoch, config)
        trainer.set_lr(lr)
        gen = _epoch_generator(config.seed, epoch)
        sums = np.zeros(5)
        batches = _epoch_batches(by_T, config.batch_size, config.seed, epoch)
        for members in batches:
            T = pos_in_T[members[0]][0]
            batch = cached[T].subset(torch.tensor([pos_in_T[i][1] for i in members]))
            try:
                lb = trainer.train_step(batch, gen)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
            sums += [lb.l_c, lb.l_ca, lb.l_gen_adv, lb.l_critic, lb.total]
        means = sums / len(batches)
        val_sr = validation_sr(model, val, A, config.val_samples, config.seed)
        row = {"epoch": epoch, "l_c": means[0], "l_ca": means[1], "l_gen_adv": means[2],
               "l_critic": means[3], "total": means[4], "lr": lr, "val_sr": val_sr}
        row = {k: (float(v) if k != "epoch" else v) for k, v in row.items()}
        curve.append(row)
        key = (val_sr, -row["l_ca"])
        if key > best_key:
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())
            if checkpoint:
                best = copy.deepcopy(model)
                save_checkpoint(checkpoint, best, epoch + 1, config.seed,
                                {"best_epoch": epoch, "val_sr": val_sr})
        if last_path:
            save_checkpoint(last_path, model, epoch + 1, config.seed,
                            {"curve": curve, "best_key": list(best_key), "best_epoch": best_epoch,
                             "train_config": asdict(config)},
                            trainer.optimizer_arrays())
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d %s", epoch, row)

    if loss_curve:
        write_loss_curve(curve, loss_curve)
    best_model = copy.deepcopy(model)
    best_model.load_state_dict(best_state)
    model.eval()
    best_model.eval()
    return FitResult(model, best_model, curve, best_epoch, best_key[0])


def _last_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.name + ".last")


def write_loss_curve(curve: Sequence[dict], path):
    keys = ("epoch", "l_c", "l_ca", "l_gen_adv", "l_critic", "lr", "val_sr")
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for row in curve:
            fh.write(json.dumps({k: row[k] for k in keys}) + "\n")


# ---------------------------------------------------------------- gradient check

LOSS_NAMES = ("l_c", "l_ca", "l_gen_adv", "l_critic")
# Central differences in float64 carry roundoff near 1e-11 * |loss| / epsilon, so
# gradients that are exactly zero come back as ~1e-11.  The relative-error
# denominator is floored well above that noise and well below real gradients.
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_loss: dict
    worst: tuple  # (loss, parameter, flat index)
    checked: int
    max_abs_error: float = 0.0


def _loss_closures(model: PlannerModel, batch: Batch, z: torch.Tensor, config: TrainConfig):
    real = one_hot_sequences(batch.actions, model.config.num_actions, model.dtype)
    with torch.no_grad():
        fake_fixed = torch.softmax(model(batch.start_obs, batch.goal_obs, z, batch.horizon)[0], -1)

    def l_c():
        _, context = model(batch.start_obs, batch.goal_obs, z, batch.horizon)
        caps = torch.stack([model.embed_caption(batch.start_cap), model.embed_caption(batch.goal_cap)], 1)
        return batch_contrastive_loss(context, caps, config.contrastive_temperature)

    def l_ca():
        logits, _ = model(batch.start_obs, batch.goal_obs, z, batch.horizon)
        return cross_entropy_loss(logits, batch.actions)

    def l_gen_adv():
        logits, _ = model(batch.start_obs, batch.goal_obs, z, batch.horizon)
        return generator_adv_loss_from_scores(model.critic_forward(torch.softmax(logits, -1), validate=False))

    def l_critic():
        return critic_loss_from_scores(model.critic_forward(real, validate=False),
                                       model.critic_forward(fake_fixed, validate=False))

    return {"l_c": l_c, "l_ca": l_ca, "l_gen_adv": l_gen_adv, "l_critic": l_critic}


@torch.no_grad()
def _numeric_grad(fn, p: torch.Tensor, eps: float) -> torch.Tensor:
    flat = p.view(-1)
    out = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = fn().item()
        flat[i] = orig - eps
        minus = fn().item()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return out.view_as(p)


def grad_check(model: PlannerModel, batch: Batch, epsilon: float = 1e-5,
               config: TrainConfig = TrainConfig(), losses: Sequence[str] = LOSS_NAMES,
               z: torch.Tensor | None = None, corrupt: tuple | None = None) -> GradCheckResult:
    """Autograd vs central differences for every parameter each loss depends on.

    Parameters outside a loss's autograd graph are skipped: the loss does not
    read them, so both gradients are exactly zero.  ``corrupt=(loss, factor)``
    scales the largest analytic gradient entry of that loss (fault injection).
    """
    if model.dtype != torch.float64:
        raise ValidationError("grad_check requires a float64 model")
    if z is None:
        z = torch.randn(batch.size, model.config.z_dim,
                        generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    model.eval()
    closures = _loss_closures(model, batch, z, config)
    named = list(model.named_parameters())
    per_loss = {}
    worst = (None, None, -1)
    overall = 0.0
    max_abs = 0.0
    checked = 0
    for loss_name in losses:
        fn = closures[loss_name]
        grads = torch.autograd.grad(fn(), [p for _, p in named], allow_unused=True)
        analytic = {n: g.detach().clone() for (n, _), g in zip(named, grads) if g is not None}
        if corrupt and corrupt[0] == loss_name and analytic:
            name = max(analytic, key=lambda n: analytic[n].abs().max().item())
            flat = analytic[name].view(-1)
            flat[flat.abs().argmax()] *= corrupt[1]
        loss_max = 0.0
        for name, p in named:
            if name not in analytic:
                continue
            numeric = _numeric_grad(fn, p.data, epsilon)
            ga = analytic[name]
            diff = (ga - numeric).abs()
            rel = diff / torch.clamp(ga.abs() + numeric.abs(), min=GRAD_FLOOR)
            max_abs = max(max_abs, diff.max().item())
            checked += rel.numel()
            m = rel.max().item()
            if m > loss_max:
                loss_max = m
            if m > overall:
                overall = m
                worst = (loss_name, name, int(rel.argmax()))
        per_loss[loss_name] = loss_max
    return GradCheckResult(overall, per_loss, worst, checked, max_abs)
