"""Training loop for the distortion network."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DivergenceDetected
from .field import grid_mask, normalize_image
from .network import DistortionNet, NetworkConfig, build_network, field_to_tensor, loss_total
from .synth import GROUP, TrainingSample

log = logging.getLogger(__name__)


@dataclass
class TrainOptions:
    epochs: int = 50
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    lambda_smo: float = 1.0
    val_fraction: float = 0.1
    augment: bool = True
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    reg: float
    smo: float
    total: float
    val_reg_root: float


@dataclass
class TrainResult:
    net: DistortionNet
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "reg", "smo", "total", "val_reg_root"])
            for e in self.history:
                w.writerow([e.epoch, *(repr(float(v)) for v in (e.reg, e.smo, e.total, e.val_reg_root))])


def stack_samples(samples: list[TrainingSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Images (n,1,s,s), grid masks (n,1,g,g) and ground-truth fields (n,2,g,g)."""
    images = np.stack([normalize_image(s.distorted, s.mask) for s in samples])[:, None]
    masks = np.stack([grid_mask(s.mask, s.gt.block_size) for s in samples])[:, None]
    gts = torch.cat([field_to_tensor(s.gt) for s in samples])
    return torch.as_tensor(images, dtype=torch.float32), torch.as_tensor(masks, dtype=torch.float32), gts


def _transform_batch(x: torch.Tensor, flip: bool, k: int) -> torch.Tensor:
    if flip:
        x = torch.flip(x, dims=(3,))
    return torch.rot90(x, k, dims=(2, 3))


def _transform_vectors(v: torch.Tensor, flip: bool, k: int) -> torch.Tensor:
    v = _transform_batch(v, flip, k)
    vx, vy = v[:, 0], v[:, 1]
    if flip:
        vx = -vx
    for _ in range(k % 4):
        vx, vy = vy, -vx
    return torch.stack([vx, vy], dim=1)


def augment_batch(images, masks, gts, elements):
    """Apply one group element per item; ``elements`` holds (flip, k) pairs."""
    out = [[], [], []]
    for i, (flip, k) in enumerate(elements):
        out[0].append(_transform_batch(images[i:i + 1], flip, k))
        out[1].append(_transform_batch(masks[i:i + 1], flip, k))
        out[2].append(_transform_vectors(gts[i:i + 1], flip, k))
    return tuple(torch.cat(o).contiguous() for o in out)


def reg_error_root_tensor(est: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    norm = torch.linalg.vector_norm(est - gt, dim=1, keepdim=True)
    m = mask > 0.5
    return float(norm[m].mean())


@torch.no_grad()
def evaluate(net: DistortionNet, images, masks, gts, batch_size: int = 64) -> float:
    net.eval()
    errs, counts = [], []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        est = net(images[sl], masks[sl])
        norm = torch.linalg.vector_norm(est - gts[sl], dim=1, keepdim=True)
        m = masks[sl] > 0.5
        errs.append(float(norm[m].sum()))
        counts.append(int(m.sum()))
    return sum(errs) / max(sum(counts), 1)


@torch.no_grad()
def _mean_total(net, images, masks, gts, lambda_smo, batch_size=64) -> float:
    net.eval()
    totals = []
    for start in range(0, len(images), batch_size):
        sl = slice(start, start + batch_size)
        totals.append(loss_total(net(images[sl], masks[sl]), gts[sl], masks[sl], lambda_smo)[0].item())
    return float(np.mean(totals))


def train(
    config: NetworkConfig,
    samples: list[TrainingSample],
    options: TrainOptions | None = None,
) -> TrainResult:
    """Train from a seeded initialisation; returns the best-validation parameters.

    When the validation split is empty, the best epoch is chosen by training
    loss instead.
    """
    opt = options or TrainOptions()
    if not samples:
        raise ValueError("training needs at least one sample")
    net = build_network(config, opt.seed)
    if opt.epochs == 0:
        return TrainResult(net)

    rng = np.random.default_rng(opt.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(opt.val_fraction * len(samples))) if len(samples) > 1 else 0
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    images, masks, gts = stack_samples(samples)
    tr = (images[train_idx], masks[train_idx], gts[train_idx])
    va = (images[val_idx], masks[val_idx], gts[val_idx]) if n_val else None

    torch_gen_state = torch.random.get_rng_state()
    torch.manual_seed(opt.seed)
    optimizer = torch.optim.AdamW(net.parameters(), lr=opt.learning_rate, weight_decay=opt.weight_decay)
    steps_per_epoch = math.ceil(len(train_idx) / opt.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=opt.epochs * steps_per_epoch)

    initial = _mean_total(net, *tr, opt.lambda_smo)
    result = TrainResult(copy.deepcopy(net))
    best = math.inf
    bad_epochs = 0
    try:
        for epoch in range(1, opt.epochs + 1):
            net.train()
            perm = rng.permutation(len(train_idx))
            sums = np.zeros(3)
            for start in range(0, len(perm), opt.batch_size):
                idx = torch.as_tensor(perm[start:start + opt.batch_size])
                x, m, g = tr[0][idx], tr[1][idx], tr[2][idx]
                if opt.augment:
                    elements = [GROUP[i] for i in rng.integers(len(GROUP), size=len(idx))]
                    x, m, g = augment_batch(x, m, g, elements)
                total, parts = loss_total(net(x, m), g, m, opt.lambda_smo)
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                optimizer.step()
                scheduler.step()
                sums += len(idx) * np.array([parts.reg, parts.smo, parts.total])
            mean = sums / len(perm)
            val_err = evaluate(net, *va) if va is not None else float("nan")
            result.history.append(EpochLog(epoch, *(float(v) for v in mean), float(val_err)))
            log.info("epoch %d reg %.4f smo %.4f total %.4f val %.4f", epoch, *mean, val_err)

            if not np.isfinite(mean[2]) or mean[2] > 10 * initial:
                bad_epochs += 1
                if bad_epochs >= 3:
                    raise DivergenceDetected(f"loss diverged at epoch {epoch}")
                continue
            bad_epochs = 0
            score = val_err if va is not None else mean[0]
            if score < best:
                best = score
                result.net = copy.deepcopy(net)
                result.best_epoch = epoch
    finally:
        torch.random.set_rng_state(torch_gen_state)
    result.net.eval()
    return result
