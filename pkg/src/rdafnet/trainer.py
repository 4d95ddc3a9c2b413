"""Adam, the epoch learning-rate schedule, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .blocks import RDAFBConfig
from .data import ImagePair, augment, pad_to_even
from .losses import LossConfig, total_loss
from .metrics import psnr, ssim, to_uint8
from .network import NetworkConfig, RDAFNet
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr_initial: float = 1e-4
    lr_final: float = 1e-7
    decay_start_epoch: int = 300
    total_epochs: int = 3000

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if not 0 <= self.decay_start_epoch <= self.total_epochs:
            raise ValueError("decay_start_epoch must lie in [0, total_epochs]")


@dataclass(frozen=True)
class DataConfig:
    crop: int = 256
    batch_size: int = 1
    max_steps: int | None = None
    checkpoint_every: int = 0
    seed: int = 0


def lr_schedule(epoch: int, cfg: OptimizerConfig = OptimizerConfig()) -> float:
    """Constant until ``decay_start_epoch``, then linear down to ``lr_final`` at ``total_epochs``."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.total_epochs}")
    if epoch <= cfg.decay_start_epoch:
        return cfg.lr_initial
    frac = (epoch - cfg.decay_start_epoch) / (cfg.total_epochs - cfg.decay_start_epoch)
    # convex combination, so both endpoints are exact
    return cfg.lr_initial * (1.0 - frac) + cfg.lr_final * frac


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0


def adam_step(named_params: Sequence[tuple[str, Tensor]], state: TrainState, lr: float,
              cfg: OptimizerConfig = OptimizerConfig()) -> None:
    """One bias-corrected Adam update, in place."""
    grads = []
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
        grads.append(g)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for (name, p), g in zip(named_params, grads):
        dt = p.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))


# ---------------------------------------------------------------------------
# checkpoints


def config_to_dict(net_cfg: NetworkConfig) -> dict:
    d = asdict(net_cfg)
    d["blocks_per_stage"] = list(net_cfg.blocks_per_stage)
    return d


def config_from_dict(d: dict) -> NetworkConfig:
    d = dict(d)
    d["block"] = RDAFBConfig(**d["block"])
    d["blocks_per_stage"] = tuple(d["blocks_per_stage"])
    return NetworkConfig(**d)


def checkpoint_records(net: RDAFNet, state: TrainState | None = None) -> dict[str, np.ndarray]:
    rec = {name: p.data.copy() for name, p in net.named_parameters()}
    if state is not None:
        for name in list(rec):
            if name in state.m:
                rec[f"opt/m/{name}"] = state.m[name].copy()
                rec[f"opt/v/{name}"] = state.v[name].copy()
        rec["meta/epoch"] = np.array(state.epoch, dtype=np.int64)
        rec["meta/step"] = np.array(state.step, dtype=np.int64)
        rec["meta/seed"] = np.array(state.seed, dtype=np.int64)
    rec["meta/config"] = ckpt.json_record(config_to_dict(net.cfg))
    return rec


def save_checkpoint(path, net: RDAFNet, state: TrainState | None = None) -> None:
    ckpt.save(path, checkpoint_records(net, state))


def load_checkpoint(path, net_cfg: NetworkConfig | None = None, dtype=np.float32) -> tuple[RDAFNet, TrainState]:
    rec = ckpt.load(path)
    if net_cfg is None:
        if "meta/config" not in rec:
            raise ckpt.CheckpointError(f"{path}: no meta/config record; pass the network config explicitly")
        net_cfg = config_from_dict(ckpt.json_from_record(rec["meta/config"]))
    net = RDAFNet(net_cfg, init=False, dtype=dtype)
    ckpt.load_into(net, rec)
    state = TrainState(
        epoch=int(rec.get("meta/epoch", 0)),
        step=int(rec.get("meta/step", 0)),
        seed=int(rec.get("meta/seed", 0)),
    )
    for key, arr in rec.items():
        if key.startswith("opt/m/"):
            state.m[key[6:]] = arr.astype(dtype)
        elif key.startswith("opt/v/"):
            state.v[key[6:]] = arr.astype(dtype)
    return net, state


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    net: RDAFNet
    state: TrainState
    log: list[tuple[int, float, float]]
    diverged: bool = False
    message: str = ""


def _batch(pairs: list[ImagePair]) -> tuple[Tensor, Tensor]:
    return (Tensor(np.concatenate([p.blurred for p in pairs]), dtype=np.float32),
            Tensor(np.concatenate([p.sharp for p in pairs]), dtype=np.float32))


def dataset_loss(net: RDAFNet, pairs: Sequence[ImagePair], loss_cfg: LossConfig = LossConfig()) -> float:
    """Mean objective over whole (un-augmented) pairs, no gradients."""
    vals = []
    for p in pairs:
        outs = net.forward_stages(Tensor(p.blurred))
        vals.append(total_loss(outs, Tensor(p.sharp), loss_cfg).data.item())
    return float(np.mean(vals))


def train(net_cfg: NetworkConfig, opt_cfg: OptimizerConfig, data_cfg: DataConfig, pairs: Sequence[ImagePair],
          epochs: int, out_dir=None, loss_cfg: LossConfig = LossConfig(), resume=None,
          init_seed: int | None = None) -> TrainResult:
    """Train for ``epochs`` epochs (or ``data_cfg.max_steps`` steps), writing checkpoints and a CSV log.

    Epoch ``e`` visits pairs in the order ``default_rng([seed, e])`` draws,
    and pair ``i`` is augmented with ``default_rng([seed, e, i])``, so a
    run resumed from an epoch-end checkpoint follows the same trajectory.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("training set is empty")
    seed = data_cfg.seed
    if resume is not None:
        net, state = load_checkpoint(resume, net_cfg)
    else:
        net = RDAFNet(net_cfg, seed=seed if init_seed is None else init_seed)
        state = TrainState(seed=seed)
    named = list(net.named_parameters())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[tuple[int, float, float]] = []
    last_good = checkpoint_records(net, state)

    def finish(diverged=False, message=""):
        if out is not None:
            if diverged:
                ckpt.save(out / "checkpoint.rdaf", last_good)
            else:
                save_checkpoint(out / "checkpoint.rdaf", net, state)
            _write_log(out / "train_log.csv", history)
        return TrainResult(net, state, history, diverged, message)

    bs = data_cfg.batch_size
    for epoch in range(state.epoch + 1, epochs + 1):
        lr = lr_schedule(min(epoch, opt_cfg.total_epochs), opt_cfg)
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        losses = []
        for start in range(0, len(order), bs):
            if data_cfg.max_steps is not None and state.step >= data_cfg.max_steps:
                break
            batch = [augment(pairs[i], np.random.default_rng([seed, epoch, int(i)]), data_cfg.crop)
                     for i in order[start : start + bs]]
            blurred, sharp = _batch(batch)
            net.zero_grad()
            loss = total_loss(net.forward_stages(blurred), sharp, loss_cfg)
            value = loss.data.item()
            if not math.isfinite(value):
                msg = f"non-finite loss at epoch {epoch}, step {state.step + 1}"
                log.warning(msg)
                return finish(True, msg)
            loss.backward()
            try:
                adam_step(named, state, lr, opt_cfg)
            except TrainingDiverged as exc:
                log.warning(str(exc))
                return finish(True, str(exc))
            losses.append(value)
        if not losses:
            break
        state.epoch = epoch
        history.append((epoch, float(np.mean(losses)), lr))
        log.info("epoch %d loss %.6f lr %.3g", epoch, history[-1][1], lr)
        last_good = checkpoint_records(net, state)
        if out is not None and data_cfg.checkpoint_every and epoch % data_cfg.checkpoint_every == 0:
            ckpt.save(out / f"checkpoint_epoch{epoch:04d}.rdaf", last_good)
    return finish()


def _write_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for epoch, loss, lr in history:
            w.writerow([epoch, repr(loss), repr(lr)])


# ---------------------------------------------------------------------------
# evaluation


def deblur_array(net: RDAFNet, img: np.ndarray) -> np.ndarray:
    """Restore a (1, 3, H, W) image of any size; odd sizes are reflect-padded then cropped back."""
    padded, (h, w) = pad_to_even(img)
    out = net.deblur(Tensor(padded.astype(np.float32))).data
    return out[..., :h, :w]


def evaluate(net: RDAFNet, pairs: Sequence[ImagePair], ssim_mode: str = "per_channel") -> list[tuple[str, float, float]]:
    """Per-pair (id, psnr_db, ssim) after quantizing the restored image to 8 bits."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot evaluate an empty dataset")
    rows = []
    for p in pairs:
        restored = to_uint8(deblur_array(net, p.blurred)[0]).transpose(1, 2, 0)
        target = to_uint8(p.sharp[0]).transpose(1, 2, 0)
        rows.append((p.id, psnr(restored, target), ssim(restored, target, mode=ssim_mode)))
    return rows


def baseline_metrics(pairs: Sequence[ImagePair], ssim_mode: str = "per_channel") -> list[tuple[str, float, float]]:
    """Metrics of the blurred inputs themselves."""
    rows = []
    for p in pairs:
        a = to_uint8(p.blurred[0]).transpose(1, 2, 0)
        b = to_uint8(p.sharp[0]).transpose(1, 2, 0)
        rows.append((p.id, psnr(a, b), ssim(a, b, mode=ssim_mode)))
    return rows


@dataclass(frozen=True)
class DeskProtocol:
    """Small-scale training run used for quick experiments and the ablation table."""
    filters: int = 16
    blocks: int = 2
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 1
    crop: int = 64
    n_pairs: int = 8
    size: int = 64
    data_seed: int = 7


def desk_configs(variant: str = "am1_afm1_lrl1", filters: int = 16, blocks: int = 2,
                 lr: float = 3e-3) -> tuple[NetworkConfig, OptimizerConfig]:
    """The small configuration used for desk-scale experiments."""
    block = RDAFBConfig.from_variant(variant, filters=filters)
    net_cfg = NetworkConfig(stages=1, blocks_per_stage=(blocks,), block=block, base_filters=filters)
    return net_cfg, replace(OptimizerConfig(), lr_initial=lr)


def desk_run(variant: str = "am1_afm1_lrl1", seed: int = 0, pairs: Sequence[ImagePair] | None = None,
             protocol: DeskProtocol = DeskProtocol(), out_dir=None) -> dict:
    """Train one variant under ``protocol`` and score it on its own training pairs.

    Losses are measured on the whole un-augmented pairs before and after
    training. ``status`` is ``"diverged"`` after a non-finite loss or
    gradient, ``"not converged"`` if the loss did not drop, else
    ``"converged"``.
    """
    from .data import synth_dataset

    if pairs is None:
        pairs = synth_dataset(protocol.n_pairs, protocol.size, protocol.data_seed)
    pairs = list(pairs)
    net_cfg, opt_cfg = desk_configs(variant, protocol.filters, protocol.blocks, protocol.lr)
    data_cfg = DataConfig(crop=protocol.crop, batch_size=protocol.batch_size, max_steps=protocol.steps, seed=seed)
    initial = dataset_loss(RDAFNet(net_cfg, seed=seed), pairs)
    epochs = -(-protocol.steps * protocol.batch_size // len(pairs))
    res = train(net_cfg, opt_cfg, data_cfg, pairs, epochs=epochs, out_dir=out_dir)
    with np.errstate(all="ignore"):
        final = dataset_loss(res.net, pairs)
    blurred = float(np.mean([r[1] for r in baseline_metrics(pairs)]))
    finite = math.isfinite(final)
    rows = evaluate(res.net, pairs) if finite else []
    return {
        "variant": variant,
        "seed": seed,
        "steps": res.state.step,
        "initial_loss": initial,
        "final_loss": final,
        "loss_ratio": final / initial,
        "psnr_blurred": blurred,
        "psnr_db": float(np.mean([r[1] for r in rows])) if rows else math.nan,
        "ssim": float(np.mean([r[2] for r in rows])) if rows else math.nan,
        "status": _status(res.diverged or not finite, final < initial),
        "history": res.log,
    }


def _status(diverged: bool, improved: bool) -> str:
    if diverged:
        return "diverged"
    return "converged" if improved else "not converged"
