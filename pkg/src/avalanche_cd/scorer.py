"""Siamese difference encoder-decoder, weighted BCE, training loop and checkpoints.

Pre- and post-event patches go through one shared encoder. The deepest feature
maps are subtracted (post - pre), optionally concatenated with features from a
separate auxiliary encoder, passed through a residual fusion block and decoded
back to full resolution by nearest-neighbour upsampling stages.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .decide import sweep_thresholds
from .evalx import auprc
from .patches import AugmentConfig, PatchSample, augment, balanced_epoch
from .raster import atomic_write_bytes, atomic_write_json

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ScorerConfig:
    input_channels: int = 2
    aux_channels: int = 2
    widths: tuple = (16, 32, 64)
    use_aux: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths or any(b <= a for a, b in zip(widths, widths[1:])) or widths[0] < 1:
            raise ValueError(f"stage widths must be non-empty and increasing, got {widths}")
        object.__setattr__(self, "widths", widths)

    @property
    def reduction(self) -> int:
        return 2 ** len(self.widths)

    def check_patch(self, size: int) -> None:
        if size % self.reduction:
            raise ValueError(f"patch size {size} not divisible by {self.reduction}")


@dataclass(frozen=True)
class LossConfig:
    w_p: float = 3.0
    eps: float = PROB_EPS

    def __post_init__(self):
        if not self.w_p > 0:
            raise ValueError("positive-class weight must be > 0")


def weighted_bce(prediction, target, config: LossConfig = LossConfig()):
    """Mean of -w_p*y*log(p) - (1-y)*log(1-p) with p clamped to [eps, 1-eps].

    Returns a torch scalar for tensor input, a float otherwise.
    """
    as_float = not isinstance(prediction, torch.Tensor)
    p = torch.as_tensor(np.asarray(prediction, dtype=np.float64) if as_float else prediction)
    y = torch.as_tensor(target, dtype=p.dtype)
    p = p.clamp(config.eps, 1.0 - config.eps)
    loss = -(config.w_p * y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))
    out = loss.mean()
    return float(out) if as_float else out


# -- network ------------------------------------------------------------------


def _conv(cin: int, cout: int, k: int = 3) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class Encoder(nn.Module):
    """Stages of two 3x3 convolutions followed by 2x average pooling."""

    def __init__(self, in_channels: int, widths: Sequence[int], act: nn.Module):
        super().__init__()
        self.act = act
        convs = []
        cin = in_channels
        for w in widths:
            convs.append(nn.ModuleList([_conv(cin, w), _conv(w, w)]))
            cin = w
        self.stages = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for a, b in self.stages:
            x = self.act(b(self.act(a(x))))
            x = F.avg_pool2d(x, 2)
        return x


class SiameseScorer(nn.Module):
    def __init__(self, config: ScorerConfig = ScorerConfig()):
        super().__init__()
        self.config = config
        self.act = nn.SiLU()
        widths = config.widths
        deep = widths[-1]
        self.encoder = Encoder(config.input_channels, widths, self.act)
        self.aux_encoder = Encoder(config.aux_channels, widths, self.act) if config.use_aux else None
        fused_in = deep * (2 if config.use_aux else 1)
        self.fuse_in = _conv(fused_in, deep, 1)
        self.fuse_a = _conv(deep, deep)
        self.fuse_b = _conv(deep, deep)
        dec = []
        cin = deep
        for w in reversed(widths):
            dec.append(nn.ModuleList([_conv(cin, w), _conv(w, w)]))
            cin = w
        self.decoder = nn.ModuleList(dec)
        self.head = _conv(widths[0], 1, 1)

    # encoders and activation are built from self.act so a subclass may swap it
    def difference(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        """Deepest post-event features minus deepest pre-event features."""
        feats = self.encoder(torch.cat([pre, post], dim=0))
        f_pre, f_post = feats.split(pre.shape[0], dim=0)
        return f_post - f_pre

    def logits(self, pre, post, aux=None) -> torch.Tensor:
        cfg = self.config
        if pre.shape != post.shape:
            raise ValueError(f"pre shape {tuple(pre.shape)} != post shape {tuple(post.shape)}")
        if pre.shape[1] != cfg.input_channels:
            raise ValueError(f"expected {cfg.input_channels} SAR channels, got {pre.shape[1]}")
        cfg.check_patch(pre.shape[-1])
        cfg.check_patch(pre.shape[-2])
        if cfg.use_aux != (aux is not None):
            raise ValueError("auxiliary input must be given iff the model uses the aux branch")
        x = self.difference(pre, post)
        if aux is not None:
            if aux.shape[-2:] != pre.shape[-2:] or aux.shape[1] != cfg.aux_channels:
                raise ValueError(f"aux shape {tuple(aux.shape)} does not match the SAR input")
            x = torch.cat([x, self.aux_encoder(aux)], dim=1)
        x = self.fuse_in(x)
        x = self.act(x + self.fuse_b(self.act(self.fuse_a(x))))
        for a, b in self.decoder:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.act(b(self.act(a(x))))
        return self.head(x)[:, 0]

    def forward(self, pre, post, aux=None) -> torch.Tensor:
        p = torch.sigmoid(self.logits(pre, post, aux))
        return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Uniform fan-in scaled weights, zero biases, drawn from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
    return model


def build_model(config: ScorerConfig = ScorerConfig(), seed: int = 0) -> SiameseScorer:
    return init_parameters(SiameseScorer(config), seed)


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _tensor(x, dtype=torch.float32):
    return None if x is None else torch.as_tensor(np.require(x, requirements=("C", "W")), dtype=dtype)


def predict_batch(model: SiameseScorer, pre, post, aux=None) -> np.ndarray:
    """Probabilities for a (B, C, S, S) batch as a float32 (B, S, S) array."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(_tensor(pre, dtype), _tensor(post, dtype), _tensor(aux, dtype))
    return out.to(torch.float32).numpy()


def predict_samples(model: SiameseScorer, samples: Sequence[PatchSample],
                    batch_size: int = 64) -> np.ndarray:
    outs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        aux = np.stack([s.aux for s in chunk]) if model.config.use_aux else None
        outs.append(predict_batch(model, np.stack([s.pre for s in chunk]),
                                  np.stack([s.post for s in chunk]), aux))
    return np.concatenate(outs) if outs else np.zeros((0,), np.float32)


# -- training -----------------------------------------------------------------


@dataclass
class TrainSchedule:
    epochs: int = 30
    warmup: int = 10
    lr: float = 1e-4
    batch_size: int = 32
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    n_positive: Optional[int] = None
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    sweep_cap: Optional[int] = 4096

    def lr_at(self, epoch: int) -> float:
        """Linear warm-up over ``warmup`` epochs, then cosine decay over the rest."""
        if epoch < self.warmup:
            return self.lr * (epoch + 1) / self.warmup
        span = max(1, self.epochs - self.warmup)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * (epoch - self.warmup) / span))


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: SiameseScorer
    log: list
    best_epoch: Optional[int] = None
    thresholds: dict = field(default_factory=dict)
    val_metrics: dict = field(default_factory=dict)


LOG_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "precision", "recall", "f1", "iou",
              "auprc", "threshold")


def evaluate_samples(model: SiameseScorer, samples: Sequence[PatchSample], loss: LossConfig,
                     cap: Optional[int] = 4096) -> dict:
    probs = predict_samples(model, samples)
    labels = np.stack([s.mask for s in samples]) >= 0.5
    out = {"val_loss": weighted_bce(probs.astype(np.float64), labels.astype(np.float64), loss)}
    if labels.any():
        best = sweep_thresholds(probs, labels, 1.0, cap)
        f2 = sweep_thresholds(probs, labels, 2.0, cap)
        out.update(precision=best.precision, recall=best.recall, f1=best.f1, iou=best.iou,
                   auprc=auprc(probs, labels), threshold=best.threshold,
                   thresholds={"f1": best.to_json(), "f2": f2.to_json()})
    else:
        out.update(precision=0.0, recall=0.0, f1=0.0, iou=0.0, auprc=0.0, threshold=0.5,
                   thresholds={})
    return out


def _batch_tensors(batch: Sequence[PatchSample], use_aux: bool):
    pre = _tensor(np.stack([s.pre for s in batch]))
    post = _tensor(np.stack([s.post for s in batch]))
    aux = _tensor(np.stack([s.aux for s in batch])) if use_aux else None
    mask = _tensor(np.stack([s.mask for s in batch]))
    return pre, post, aux, mask


def train(train_samples: Sequence[PatchSample], val_samples: Sequence[PatchSample],
          config: ScorerConfig = ScorerConfig(), loss: LossConfig = LossConfig(),
          schedule: TrainSchedule = TrainSchedule(), sar_fill: Optional[Sequence[float]] = None,
          log_path: str | os.PathLike | None = None) -> TrainResult:
    """Fit on balanced epochs, keeping the snapshot with the best validation AUPRC."""
    if schedule.epochs > 0 and (not train_samples or not val_samples):
        raise ValueError("training needs non-empty train and val splits")
    torch.manual_seed(schedule.seed)
    model = build_model(config, schedule.seed)
    if config.use_aux and any(s.aux is None for s in train_samples):
        raise ValueError("use_aux requires auxiliary windows in every training patch")
    if train_samples:
        config.check_patch(train_samples[0].size)
    opt = torch.optim.AdamW(model.parameters(), lr=schedule.lr, betas=tuple(schedule.betas),
                            weight_decay=schedule.weight_decay)
    result = TrainResult(model, [])
    best_auprc = -1.0
    best_state = None

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        epoch_seed = schedule.seed * 1_000_003 + epoch
        order = balanced_epoch(train_samples, epoch_seed, schedule.n_positive)
        if schedule.augment is not None:
            seeds = np.random.SeedSequence([schedule.seed, epoch]).generate_state(len(order))
            order = [augment(s, schedule.augment, int(k), sar_fill) for s, k in zip(order, seeds)]

        model.train()
        total, n = 0.0, 0
        for i in range(0, len(order), schedule.batch_size):
            batch = order[i:i + schedule.batch_size]
            pre, post, aux, mask = _batch_tensors(batch, config.use_aux)
            opt.zero_grad()
            value = weighted_bce(model(pre, post, aux), mask, loss)
            if not torch.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {float(value)} at epoch {epoch}, batch {i // schedule.batch_size}"
                    f" (lr={lr:.3g})")
            value.backward()
            opt.step()
            total += float(value.detach()) * len(batch)
            n += len(batch)

        metrics = evaluate_samples(model, val_samples, loss, schedule.sweep_cap)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / max(n, 1),
               **{k: metrics[k] for k in LOG_FIELDS[3:]}}
        result.log.append(row)
        log.info("epoch %d lr=%.3g loss=%.4f val_f1=%.4f auprc=%.4f", epoch, lr,
                 row["train_loss"], row["f1"], row["auprc"])
        if metrics["auprc"] > best_auprc:
            best_auprc = metrics["auprc"]
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            result.thresholds = metrics["thresholds"]
            result.val_metrics = {k: metrics[k] for k in LOG_FIELDS[3:]}

    if best_state is not None:
        model.load_state_dict(best_state)
    if log_path is not None:
        write_training_log(result.log, log_path, schedule)
    return result


def write_training_log(rows: Sequence[dict], path: str | os.PathLike,
                       schedule: TrainSchedule | None = None) -> None:
    from io import StringIO

    buf = StringIO()
    if schedule is not None:
        buf.write(f"# optimizer=AdamW betas={tuple(schedule.betas)} "
                  f"weight_decay={schedule.weight_decay} base_lr={schedule.lr} "
                  f"warmup={schedule.warmup} epochs={schedule.epochs} seed={schedule.seed}\n")
    writer = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})
    atomic_write_bytes(Path(path), buf.getvalue().encode("utf-8"))


# -- gradient verification ----------------------------------------------------


def grad_check(model: SiameseScorer, sample: PatchSample, epsilon: float = 1e-3,
               n_checks: int = 40, seed: int = 0, loss: LossConfig = LossConfig(),
               atol: float = 1e-8) -> float:
    """Max relative error between autograd and central-difference gradients.

    Runs on a float64 copy of ``model``; ``n_checks`` parameter entries are
    drawn at random. Relative error is |a - n| / max(|a|, |n|, atol).
    """
    if n_checks <= 0:
        return 0.0
    m = copy.deepcopy(model).double()
    m.train()
    pre = _tensor(sample.pre[None], torch.float64)
    post = _tensor(sample.post[None], torch.float64)
    aux = _tensor(sample.aux[None], torch.float64) if m.config.use_aux else None
    target = _tensor(sample.mask[None], torch.float64)

    def objective():
        return weighted_bce(m(pre, post, aux), target, loss)

    m.zero_grad()
    objective().backward()
    params = [p for p in m.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_checks, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for k in flat:
            pi = int(np.searchsorted(bounds, k, side="right"))
            idx = int(k - (bounds[pi - 1] if pi else 0))
            p = params[pi].view(-1)
            analytic = float(params[pi].grad.view(-1)[idx])
            orig = float(p[idx])
            p[idx] = orig + epsilon
            plus = float(objective())
            p[idx] = orig - epsilon
            minus = float(objective())
            p[idx] = orig
            numeric = (plus - minus) / (2 * epsilon)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)
            worst = max(worst, err)
    return worst


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: SiameseScorer, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Header JSON (config, layout, extra metadata) + float32 little-endian parameter payload."""
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    state = model.state_dict()
    layout = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    payload = b"".join(v.detach().to(torch.float32).numpy().astype("<f4").tobytes() for v in state.values())
    header = {"format": "siamese-scorer/1", "config": asdict(model.config), "layout": layout}
    header.update(extra or {})
    atomic_write_bytes(stem.with_suffix(".bin"), payload)
    atomic_write_json(stem.with_suffix(".json"), header)


def read_checkpoint_header(path: str | os.PathLike) -> dict:
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return json.loads(stem.with_suffix(".json").read_text())


def update_checkpoint_header(path: str | os.PathLike, **fields) -> dict:
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    header = read_checkpoint_header(stem)
    for k, v in fields.items():
        if isinstance(v, dict) and isinstance(header.get(k), dict):
            header[k].update(v)
        else:
            header[k] = v
    atomic_write_json(stem.with_suffix(".json"), header)
    return header


def load_checkpoint(path: str | os.PathLike) -> tuple[SiameseScorer, dict]:
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    header = read_checkpoint_header(stem)
    cfg = header["config"]
    config = ScorerConfig(cfg["input_channels"], cfg["aux_channels"], tuple(cfg["widths"]),
                          bool(cfg["use_aux"]))
    model = SiameseScorer(config)
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4")
    expected = sum(int(np.prod(e["shape"])) for e in header["layout"])
    if raw.size != expected:
        raise ValueError(f"{stem}: payload has {raw.size} values, layout needs {expected}")
    state, pos = {}, 0
    for entry in header["layout"]:
        n = int(np.prod(entry["shape"]))
        state[entry["name"]] = torch.from_numpy(raw[pos:pos + n].copy()).reshape(entry["shape"])
        pos += n
    model.load_state_dict(state)
    model.eval()
    return model, header
