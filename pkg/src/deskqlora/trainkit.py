"""Loss, AdamW, warmup + cosine schedule, gradient accumulation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import EOS, IGNORE_ID, PAD, PromptPair, detokenize, tokenize
from .model import QLoraModel
from .numerics import Rng

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "LossCurve",
    "Example",
    "NonFiniteError",
    "cross_entropy",
    "sequence_losses",
    "adamw_step",
    "lr_at",
    "encode_example",
    "accumulate_gradients",
    "train",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    pass


@dataclass(kw_only=True)
class TrainConfig:
    """Training hyperparameters. Defaults are the full-scale settings; ``max_iters`` is required."""

    max_iters: int
    learning_rate: float = 2e-4
    batch_size: int = 128
    micro_batch: int = 1
    max_seq: int = 2500
    weight_decay: float = 0.01
    warmup_steps: int = 100
    eval_interval: int = 100
    eval_iters: int = 20
    seed: int = 1337
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    sample_tokens: int = 48

    def __post_init__(self):
        if self.batch_size % self.micro_batch:
            raise ValueError(f"batch_size {self.batch_size} is not a multiple of micro_batch {self.micro_batch}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 <= self.warmup_steps < self.max_iters:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be below max_iters ({self.max_iters})")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    @property
    def grad_accum(self) -> int:
        return self.batch_size // self.micro_batch

    @classmethod
    def desk(cls, max_iters: int = 200, **overrides) -> "TrainConfig":
        """Toy-scale preset: small batches and a higher learning rate so a
        few hundred CPU iterations visibly train the adapters."""
        base = dict(
            learning_rate=3e-3,
            batch_size=8,
            micro_batch=1,
            max_seq=768,
            warmup_steps=min(20, max_iters - 1),
            eval_interval=50,
            eval_iters=8,
        )
        base.update(overrides)
        return cls(max_iters=max_iters, **base)

    def to_dict(self) -> dict:
        return asdict(self)


# loss ----------------------------------------------------------------------


def sequence_losses(logits: torch.Tensor, targets: torch.Tensor, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    """Per-sequence mean of -log softmax(logits)[target] over non-ignored positions."""
    if logits.dim() == 2:
        logits, targets = logits[None], targets[None]
    if logits.shape[:2] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    keep = targets != ignore_id
    counts = keep.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("a sequence has no supervised target positions")
    safe = torch.where(keep, targets, torch.zeros_like(targets))
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    nll = -logp.gather(-1, safe[..., None]).squeeze(-1)
    return (nll * keep).sum(dim=1) / counts


def cross_entropy(logits: torch.Tensor, targets, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    targets = torch.as_tensor(targets, dtype=torch.long)
    return sequence_losses(logits, targets, ignore_id).mean()


# optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


@torch.no_grad()
def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimizerState, lr: float):
    """Bias-corrected Adam with decoupled weight decay, applied in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    bad = [n for n, g in grads.items() if not bool(torch.isfinite(g).all())]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {len(bad)} tensor(s): {', '.join(sorted(bad)[:5])}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: parameter {tuple(p.shape)} vs gradient {tuple(g.shape)}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        update = (m / c1) / ((v / c2).sqrt() + state.eps)
        p.sub_(lr * update + lr * state.weight_decay * p)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> learning_rate, then cosine annealing to 0 at max_iters."""
    if not 0 <= step <= cfg.max_iters:
        raise ValueError(f"step {step} outside [0, {cfg.max_iters}]")
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = cfg.max_iters - cfg.warmup_steps
    return cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


# data ----------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    inputs: list[int]
    targets: list[int]
    prompt_ids: list[int]


def encode_example(pair: PromptPair, max_seq: int) -> Example:
    """[BOS] prompt target [EOS], shifted by one; prompt positions are ignored in the loss."""
    p = tokenize(pair.prompt, bos=True, eos=False)
    t = tokenize(pair.target, bos=False, eos=True)
    seq = (p + t)[: max_seq + 1]
    if len(seq) <= len(p):
        raise ValueError(f"prompt of {len(p)} tokens leaves no room for a target within max_seq={max_seq}")
    inputs = seq[:-1]
    targets = [IGNORE_ID if i + 1 < len(p) else tok for i, tok in enumerate(seq[1:])]
    return Example(inputs, targets, p)


def collate(batch: Sequence[Example]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(e.inputs) for e in batch)
    x = torch.full((len(batch), width), PAD, dtype=torch.long)
    y = torch.full((len(batch), width), IGNORE_ID, dtype=torch.long)
    for i, e in enumerate(batch):
        x[i, : len(e.inputs)] = torch.tensor(e.inputs)
        y[i, : len(e.targets)] = torch.tensor(e.targets)
    return x, y


def accumulate_gradients(
    model: QLoraModel,
    micro_batches: Sequence[Sequence[Example]],
    generator: torch.Generator | None = None,
) -> float:
    """Backprop every micro-batch; gradients end up equal to those of the
    concatenated batch's mean per-sequence loss. Returns that loss."""
    total_rows = sum(len(mb) for mb in micro_batches)
    loss_sum = 0.0
    for mb in micro_batches:
        x, y = collate(mb)
        losses = sequence_losses(model(x, generator), y)
        (losses.sum() / total_rows).backward()
        loss_sum += float(losses.detach().sum())
    return loss_sum / total_rows


# loss curve ----------------------------------------------------------------


@dataclass
class LossCurve:
    train: list[tuple[int, float]] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)

    def add(self, split: str, it: int, loss: float) -> None:
        series = self.train if split == "train" else self.val
        if series and it <= series[-1][0]:
            raise ValueError(f"{split} iterations must increase ({it} after {series[-1][0]})")
        series.append((it, float(loss)))

    def truncate(self, it: int) -> None:
        self.train = [p for p in self.train if p[0] <= it]
        self.val = [p for p in self.val if p[0] <= it]

    def to_csv(self, path) -> None:
        rows = [(i, "train", l) for i, l in self.train] + [(i, "val", l) for i, l in self.val]
        rows.sort(key=lambda r: (r[0], r[1]))
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "split", "loss"])
            for i, s, l in rows:
                w.writerow([i, s, repr(l)])

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        curve = cls()
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in sorted(rows, key=lambda r: int(r["iter"])):
            curve.add(r["split"], int(r["iter"]), float(r["loss"]))
        return curve


# training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    curve: LossCurve
    iteration: int
    samples: list[tuple[int, str]] = field(default_factory=list)
    final_checkpoint: Path | None = None


class _Sampler:
    """Deterministic epoch-wise reshuffling; position g maps to the same example on resume."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def __getitem__(self, g: int) -> int:
        epoch, k = divmod(g, self.n)
        perm = self._perms.get(epoch)
        if perm is None:
            perm = Rng(self.seed * 1_000_003 + epoch).permutation(self.n)
            self._perms = {epoch: perm}
        return int(perm[k])


def evaluate(model: QLoraModel, data: Sequence[Example], n: int) -> float:
    model.eval()
    with torch.no_grad():
        losses = [float(cross_entropy(model(torch.tensor(e.inputs)), e.targets)) for e in data[:n]]
    return float(np.mean(losses))


def train(
    model: QLoraModel,
    train_data: Sequence[Example],
    val_data: Sequence[Example],
    cfg: TrainConfig,
    out_dir=None,
    *,
    until: int | None = None,
    resume: bool = False,
    on_log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run optimizer steps ``start+1 .. until`` (default ``cfg.max_iters``).

    Each step accumulates ``grad_accum`` micro-batches, applies AdamW at
    ``lr_at(step)`` and records the step's mean training loss. Every
    ``eval_interval`` steps (and at the end) it measures validation loss,
    greedily decodes one validation prompt and writes ``last.ckpt``. The
    run ends by writing the adapter-only ``lora_final.ckpt`` and
    ``loss.csv``.
    """
    if not train_data:
        raise ValueError("training split is empty")
    if not val_data:
        raise ValueError("validation split is empty")
    say = on_log or log.info
    until = cfg.max_iters if until is None else until
    if not 0 <= until <= cfg.max_iters:
        raise ValueError(f"until={until} outside [0, {cfg.max_iters}]")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = model.adapter_set.named_tensors()
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params.values():
        p.requires_grad_(True)

    state = OptimizerState.from_config(cfg)
    curve = LossCurve()
    start = 0
    if resume:
        if out is None or not (out / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        ck = load_checkpoint(out / "last.ckpt")
        _check_digest(ck, model)
        model.load_adapter_state(ck.adapters)
        restore_optimizer(state, ck, params)
        start = ck.iteration
        if (out / "loss.csv").exists():
            curve = LossCurve.from_csv(out / "loss.csv")
            curve.truncate(start)
        say(f"resumed from iteration {start}")

    result = TrainResult(curve, start)
    sampler = _Sampler(len(train_data), cfg.seed)
    meta = {"train": cfg.to_dict()}

    for it in range(start + 1, until + 1):
        model.train()
        gen = torch.Generator().manual_seed(cfg.seed * 7919 + it)
        base = (it - 1) * cfg.batch_size
        micro = [
            [train_data[sampler[base + j * cfg.micro_batch + k]] for k in range(cfg.micro_batch)]
            for j in range(cfg.grad_accum)
        ]
        for p in params.values():
            p.grad = None
        loss = accumulate_gradients(model, micro, gen)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss at iteration {it}; last good checkpoint kept")
        adamw_step(params, {n: p.grad for n, p in params.items()}, state, lr_at(it, cfg))
        curve.add("train", it, loss)
        result.iteration = it

        if it % cfg.eval_interval == 0 or it == until:
            val = evaluate(model, val_data, cfg.eval_iters)
            curve.add("val", it, val)
            ex = val_data[0]
            ids = model.generate(ex.prompt_ids, cfg.sample_tokens, eos_id=EOS)
            sample = detokenize(ids[len(ex.prompt_ids) :])
            result.samples.append((it, sample))
            say(f"iter {it}: train {loss:.4f} val {val:.4f} lr {lr_at(it, cfg):.2e} | sample: {sample!r}")
            if out is not None:
                save_checkpoint(out / "last.ckpt", model.adapter_state(), state, it, model.cfg.digest(), meta)
                curve.to_csv(out / "loss.csv")

    if out is not None:
        if until == start:
            save_checkpoint(out / "last.ckpt", model.adapter_state(), state, start, model.cfg.digest(), meta)
        result.final_checkpoint = save_checkpoint(
            out / "lora_final.ckpt", model.adapter_state(), None, result.iteration, model.cfg.digest(), meta
        )
        curve.to_csv(out / "loss.csv")
    for p in params.values():
        p.grad = None
    return result


class CheckpointMismatchError(ValueError):
    pass


def _check_digest(ck: Checkpoint, model: QLoraModel) -> None:
    if ck.config_digest and ck.config_digest != model.cfg.digest():
        raise CheckpointMismatchError(
            f"checkpoint was written for model config {ck.config_digest}, this model is {model.cfg.digest()}"
        )


def restore_optimizer(state: OptimizerState, ck: Checkpoint, params: dict[str, torch.Tensor]) -> None:
    state.step = ck.optimizer_step
    for name, p in params.items():
        m = ck.optimizer.get(f"{name}/exp_avg")
        v = ck.optimizer.get(f"{name}/exp_avg_sq")
        if m is not None and v is not None:
            state.exp_avg[name] = m.to(p.dtype).clone()
            state.exp_avg_sq[name] = v.to(p.dtype).clone()


def load_adapters(model: QLoraModel, path) -> Checkpoint:
    """Load a checkpoint's adapter tensors into ``model`` (config digest must match)."""
    ck = load_checkpoint(path)
    _check_digest(ck, model)
    model.load_adapter_state(ck.adapters)
    return ck


# gradient check ------------------------------------------------------------


def gradcheck(
    model: QLoraModel,
    example: Example,
    eps: float = 1e-4,
    n_params: int = 20,
    seed: int = 0,
) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    Samples ``n_params`` adapter entries. Run on a float64 model with
    dropout off (the model is put in eval mode).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    model.eval()
    params = model.adapter_set.named_tensors()
    names = sorted(params)
    x = torch.tensor(example.inputs)
    y = torch.tensor(example.targets)

    def loss_value() -> float:
        with torch.no_grad():
            return float(cross_entropy(model(x), y))

    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    cross_entropy(model(x), y).backward()
    analytic = {n: params[n].grad.detach().clone() for n in names}
    for p in params.values():
        p.grad = None

    rng = Rng(seed)
    sizes = np.array([params[n].numel() for n in names])
    picks = []
    for _ in range(n_params):
        flat = int(rng.integers(sizes.sum()))
        idx = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        picks.append((names[idx], flat - int(sizes[:idx].sum())))

    worst = 0.0
    with torch.no_grad():
        for name, k in picks:
            view = params[name].view(-1)
            orig = view[k].item()
            view[k] = orig + eps
            up = loss_value()
            view[k] = orig - eps
            down = loss_value()
            view[k] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].view(-1)[k].item()
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
