"""Training loops for the attention network, the detector and the full cascade.

Training data are :class:`TrainingPair` records: the fixed search patch around
the first-frame landmark, the landmark position in a later frame, and the
targets derived from it. Pairs of one (sequence, landmark) share a
:class:`PatchTrack` holding every frame's patch, which the LSTM windows need.

Optimization is plain SGD with optional momentum. An epoch's loss is the
pair-weighted mean of its step losses; epoch 0 is the loss of the initial
parameters. Training stops at ``max_epochs`` or once the epoch-to-epoch
decrease stays below ``delta_stop`` for ``patience`` consecutive epochs.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import cascade as C
from . import ndtensor as nd
from .boxgeom import Box, BoxDelta, anchor_array, clip_box, encode, iou_matrix
from .dataio import SequenceBundle, crop_patch, patch_origin
from .losses import (LossWeights, MarginConfig, MaskLossConfig, attention_loss,
                     box_loss, combined_loss, margin_cls_loss, mask_loss)
from .ndtensor import Tensor

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "L", "Lcls", "Lmask", "Lbox", "Latt")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


# "synthetic" equals the TrainConfig defaults; "paper" is plain full-track SGD
PRESETS = {
    "paper": dict(learning_rate=1e-6, max_epochs=1000, delta_stop=1e-3, patience=1, momentum=0.0,
                  lr_decay=1.0, clip_norm=0.0, batch_frames=0, attn_epochs=None,
                  attn_learning_rate=None, augment=1),
    "synthetic": dict(learning_rate=5e-2, max_epochs=25, delta_stop=1e-3, patience=5, momentum=0.9,
                      lr_decay=0.9, clip_norm=5.0, batch_frames=16, attn_epochs=10,
                      attn_learning_rate=1e-2, augment=8),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-2
    max_epochs: int = 25
    delta_stop: float = 1e-3
    seed: int = 0
    preset: str = "synthetic"
    patience: int = 5
    momentum: float = 0.9
    clip_norm: float = 5.0               # 0 disables gradient-norm clipping
    lr_decay: float = 0.9                # learning rate multiplier applied after every epoch
    batch_frames: int = 16               # 0: all pairs of one track per step
    attn_epochs: int | None = 10         # None: max_epochs
    attn_learning_rate: float | None = 1e-2  # None: learning_rate
    joint_epochs: int = 0                # end-to-end epochs after staged training
    weights: LossWeights = LossWeights()
    margin: MarginConfig = MarginConfig()
    mask: MaskLossConfig = MaskLossConfig()
    n_pos: int = 4
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    neg_ratio: float = 3.0
    hard_neg_frac: float = 1.0
    neg_region: str = "search"           # "search": whole patch, "region": anchor region only
    include_reference: bool = True
    augment: int = 8                     # flip/transpose views per training sequence (1..8)
    augment_block: int = 16              # frames per contiguous block handed to one view
    audit_steps: int = 0                 # finite-difference audits on the first N steps
    audit_coords: int = 6

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.delta_stop <= 0:
            raise ValueError("learning_rate, max_epochs and delta_stop must be positive")
        if self.patience < 1 or not 0 <= self.momentum < 1:
            raise ValueError("patience must be >= 1 and momentum in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.preset == "paper":
            for k, v in PRESETS["paper"].items():
                if k in ("learning_rate", "max_epochs", "delta_stop") and getattr(self, k) != v:
                    raise ValueError(f"preset {self.preset!r} fixes {k} = {v}")
        if self.neg_region not in ("search", "region"):
            raise ValueError("neg_region must be 'search' or 'region'")
        if not 1 <= self.augment <= 8 or self.augment_block < 1:
            raise ValueError("augment must lie in 1..8 and augment_block be >= 1")
        if not 0 < self.pos_iou <= 1 or not 0 <= self.neg_iou < self.pos_iou:
            raise ValueError("need 0 <= neg_iou < pos_iou <= 1")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(preset=name, **{**PRESETS[name], **overrides})


# -- training data ----------------------------------------------------------------

@dataclass
class PatchTrack:
    """Every frame's search patch for one (sequence, landmark)."""
    key: str
    patches: np.ndarray          # [n_frames, P, P] in [0, 1]
    origin: tuple                # patch origin in frame coordinates
    ref_center: tuple            # first-frame landmark in patch coordinates
    source_tag: str = "OTHER"


@dataclass
class TrainingPair:
    patch: np.ndarray
    attn_delta: BoxDelta
    position: tuple              # landmark in patch coordinates
    mask: np.ndarray             # [mask_size, mask_size] binary, on the 20x20 box at the landmark
    frame_index: int
    landmark_id: object = None
    track: PatchTrack | None = field(default=None, repr=False)

    @property
    def gt_box(self) -> Box:
        return Box(self.position[0], self.position[1], 20.0, 20.0)


def disk_mask(offset, size: int, radius: float) -> np.ndarray:
    """Binary disk of ``radius`` at ``offset`` from the center of a ``size`` grid."""
    c = (size - 1) / 2
    g = np.arange(size) - c
    dx = g[None, :] - offset[0]
    dy = g[:, None] - offset[1]
    return (dx * dx + dy * dy <= radius * radius).astype(np.uint8)


def disk_masks(anchors: np.ndarray, pos: np.ndarray, size: int, radius: float) -> np.ndarray:
    """Disk masks ``[n, size, size]`` on grids centered at each anchor, one landmark per row of ``pos``."""
    c = (size - 1) / 2
    g = np.arange(size) - c
    dx = g[None, None, :] - (pos[:, 0] - anchors[:, 0])[:, None, None]
    dy = g[None, :, None] - (pos[:, 1] - anchors[:, 1])[:, None, None]
    return (dx * dx + dy * dy <= radius * radius).astype(np.int64)


def make_track(seq: SequenceBundle, lid, arch: C.ArchConfig = C.ArchConfig()) -> PatchTrack:
    center = seq.first_position(lid)
    P = arch.patch_size
    ox, oy = patch_origin(center, P)
    patches = np.stack([crop_patch(f, center, P) for f in seq.frames])
    return PatchTrack(f"{seq.name}/{lid}", patches, (ox, oy),
                      (center[0] - ox, center[1] - oy), seq.source_tag)


def extract_training_pairs(seq: SequenceBundle, arch: C.ArchConfig = C.ArchConfig(),
                           include_reference: bool = True, counts: dict | None = None) -> list:
    """One pair per annotated (landmark, frame), patches fixed at the first-frame landmark.

    Pairs whose landmark falls outside the patch are dropped; ``counts`` (if
    given) receives ``pairs`` and ``dropped`` totals.
    """
    pairs, dropped = [], 0
    P = arch.patch_size
    for lid, rows in seq.landmarks.items():
        if len(rows) < 2:
            log.warning("%s landmark %s: no annotated frame after the first", seq.name, lid)
        track = make_track(seq, lid, arch)
        ox, oy = track.origin
        ref = C.attention_reference(arch, track.ref_center)
        for fi, x, y in rows:
            if fi == 0 and not include_reference:
                continue
            px, py = x - ox, y - oy
            if not (0 <= px <= P - 1 and 0 <= py <= P - 1):
                dropped += 1
                log.info("%s landmark %s frame %d: outside the search patch, pair dropped", seq.name, lid, fi)
                continue
            delta = encode(Box(px, py, arch.attn_box, arch.attn_box), ref)
            mask = disk_mask((0.0, 0.0), arch.mask_size, arch.mask_radius)
            pairs.append(TrainingPair(track.patches[fi], delta, (px, py), mask, fi, lid, track))
    if counts is not None:
        counts["pairs"] = counts.get("pairs", 0) + len(pairs)
        counts["dropped"] = counts.get("dropped", 0) + dropped
    return pairs


def dihedral_view(seq: SequenceBundle, k: int) -> SequenceBundle:
    """One of the 8 flip/transpose views of a sequence (``k = 0`` is the identity).

    Bit 2 of ``k`` transposes, bit 0 flips columns, bit 1 flips rows; the
    annotations move with the pixels.
    """
    if not 0 <= k < 8:
        raise ValueError(f"dihedral view index must lie in 0..7, got {k}")
    if k == 0:
        return seq
    transpose, fx, fy = bool(k & 4), bool(k & 1), bool(k & 2)
    H, W = seq.shape
    if transpose:
        H, W = W, H

    def frame(f):
        f = f.T if transpose else f
        return np.ascontiguousarray(f[::-1 if fy else 1, ::-1 if fx else 1])

    def point(x, y):
        if transpose:
            x, y = y, x
        return (W - 1 - x if fx else x, H - 1 - y if fy else y)

    landmarks = {lid: [(fi, *point(x, y)) for fi, x, y in rows] for lid, rows in seq.landmarks.items()}
    truth = None
    if seq.truth is not None:
        truth = {lid: np.array([point(x, y) for x, y in path]) for lid, path in seq.truth.items()}
    return SequenceBundle([frame(f) for f in seq.frames], seq.spacing_mm, seq.hz, landmarks,
                          seq.source_tag, f"{seq.name}~d{k}", truth)


def pairs_from_sequences(seqs, arch: C.ArchConfig = C.ArchConfig(), include_reference: bool = True,
                         counts: dict | None = None) -> list:
    out = []
    for s in seqs:
        out.extend(extract_training_pairs(s, arch, include_reference, counts))
    return out


def training_pairs(seqs, cfg: TrainConfig, arch: C.ArchConfig = C.ArchConfig(),
                   counts: dict | None = None) -> list:
    """Pairs for training under ``cfg``.

    With ``cfg.augment = V > 1`` each sequence is seen through V flip/transpose
    views and its frames are dealt out in contiguous blocks of
    ``cfg.augment_block``: block j goes to view j mod V. Every annotated frame
    yields one pair, as without augmentation, and LSTM windows stay contiguous.
    """
    out = []
    for s in seqs:
        for k in range(cfg.augment):
            pairs = extract_training_pairs(dihedral_view(s, k), arch, cfg.include_reference, counts)
            out.extend(p for p in pairs if (p.frame_index // cfg.augment_block) % cfg.augment == k)
    if counts is not None and cfg.augment > 1:
        counts["pairs"] = len(out)
    return out


def five_fold_split(ids, seed: int = 0, k: int = 5) -> list:
    """Seeded partition into ``k`` folds of near-equal size; returns ``[(train, test), ...]``."""
    ids = list(ids)
    if len(ids) < k:
        raise ValueError(f"need at least {k} ids for {k}-fold splitting, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds, pos = [], 0
    for i in range(k):
        n = base + (1 if i < extra else 0)
        test = shuffled[pos:pos + n]
        pos += n
        folds.append(test)
    return [([x for x in ids if x not in set(t)], t) for t in folds]


# -- stop rule and optimizer --------------------------------------------------------

def should_stop(losses, cfg: TrainConfig) -> bool:
    """``losses[0]`` is the initial loss, ``losses[e]`` the loss after epoch ``e``."""
    epochs = len(losses) - 1
    if epochs >= cfg.max_epochs:
        return True
    if epochs < cfg.patience:
        return False
    return all(losses[e - 1] - losses[e] < cfg.delta_stop for e in range(epochs - cfg.patience + 1, epochs + 1))


def stop_epoch(losses, cfg: TrainConfig) -> int:
    """Number of epochs a run with this loss trace would execute."""
    for e in range(1, len(losses)):
        if should_stop(losses[:e + 1], cfg):
            return e
    return len(losses) - 1


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0, clip_norm: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = 1.0
        if self.clip_norm > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g * scale
            p.data -= self.lr * v

    def zero_grad(self):
        nd.zero_grads(self.params)


def audit_gradients(loss_fn, params, rng, n: int = 6, h: float = 1e-6) -> float:
    """Central-difference check of the current gradients at ``n`` random coordinates.

    ``loss_fn()`` must rebuild the same loss (same samples, same constants).
    Returns the largest relative deviation.
    """
    params = [p for p in params if p.grad is not None]
    worst = 0.0
    for _ in range(n):
        p = params[rng.integers(len(params))]
        j = np.unravel_index(rng.integers(p.data.size), p.data.shape)
        old = p.data[j]
        with nd.no_grad():
            p.data[j] = old + h
            up = loss_fn().item()
            p.data[j] = old - h
            dn = loss_fn().item()
        p.data[j] = old
        num = (up - dn) / (2 * h)
        ana = float(p.grad[j])
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst


@dataclass
class TrainResult:
    model: object
    history: list                      # dicts keyed by LOSS_COLUMNS
    skipped: int = 0
    audits: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [h["L"] for h in self.history]

    @property
    def epochs(self) -> int:
        return len(self.history) - 1


def write_loss_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h.get(k, 0.0))) for k in LOSS_COLUMNS[1:]])


def _run(params, batches, loss_fn, cfg: TrainConfig, rng, max_epochs: int, label: str):
    """Shared epoch loop. ``loss_fn(batch, rng, plan)`` returns ``(loss, parts, weight, plan)``."""
    opt = SGD(params.values(), cfg.learning_rate, cfg.momentum, cfg.clip_norm)
    run_cfg = replace(cfg, max_epochs=max_epochs) if max_epochs != cfg.max_epochs else cfg
    history, audits, step = [], [], 0

    def record(epoch, sums, total_w):
        row = {"epoch": epoch}
        for k in LOSS_COLUMNS[1:]:
            row[k] = sums.get(k, 0.0) / max(total_w, 1e-12)
        if not math.isfinite(row["L"]):
            raise TrainingDiverged(epoch)
        history.append(row)
        log.info("%s epoch %d: L=%.6g", label, epoch, row["L"])

    sums, tw = {}, 0.0
    eval_rng = np.random.default_rng(rng.integers(2 ** 63))
    with nd.no_grad():
        for b in batches:
            loss, parts, w, _ = loss_fn(b, eval_rng, None)
            tw += w
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * w
    record(0, sums, tw)
    while not should_stop([h["L"] for h in history], run_cfg):
        epoch = len(history)
        opt.lr = cfg.learning_rate * cfg.lr_decay ** (epoch - 1)
        sums, tw = {}, 0.0
        for bi in rng.permutation(len(batches)):
            b = batches[bi]
            opt.zero_grad()
            loss, parts, w, plan = loss_fn(b, rng, None)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(epoch)
            nd.backward(loss)
            if step < cfg.audit_steps:
                err = audit_gradients(lambda: loss_fn(b, rng, plan)[0], params.values(), rng, cfg.audit_coords)
                audits.append(err)
                log.info("%s step %d gradient audit: max rel err %.3g", label, step, err)
            opt.step()
            step += 1
            tw += w
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * w
        record(epoch, sums, tw)
    return history, audits


def _batches(pairs, batch_frames: int) -> list:
    by_track = OrderedDict()
    for p in pairs:
        by_track.setdefault(id(p.track), []).append(p)
    out = []
    for group in by_track.values():
        group.sort(key=lambda p: p.frame_index)
        n = batch_frames if batch_frames > 0 else len(group)
        out.extend(group[i:i + n] for i in range(0, len(group), n))
    return out


# -- attention network ------------------------------------------------------------------

def _resample(patch, box: Box, size: int) -> np.ndarray:
    P = patch.shape[0]
    xs = np.clip(np.floor(box.x0 + (np.arange(size) + 0.5) * box.w / size + 0.5).astype(int), 0, P - 1)
    ys = np.clip(np.floor(box.y0 + (np.arange(size) + 0.5) * box.h / size + 0.5).astype(int), 0, P - 1)
    return patch[np.ix_(ys, xs)]


def patch_term(patch, pred: Box, gt: Box, size: int):
    """(U, V, N): predicted and ground-truth box contents on a common grid and the
    number of pixels the two boxes share."""
    iw = min(pred.x1, gt.x1) - max(pred.x0, gt.x0)
    ih = min(pred.y1, gt.y1) - max(pred.y0, gt.y0)
    N = int(round(max(iw, 0) * max(ih, 0)))
    return _resample(patch, pred, size), _resample(patch, gt, size), N


def _attention_loss_fn(model: C.AttentionModel, use_patch_term: bool = True):
    arch = model.cfg
    side = max(1, int(round(arch.attn_box)))

    def fn(batch, rng, plan):
        x = np.stack([p.patch for p in batch])
        gt = np.array([p.attn_delta.as_tuple() for p in batch])
        pred = model.forward_batch(x)
        loss = attention_loss(pred, gt) * (1.0 / len(batch))
        extra = 0.0
        if use_patch_term:
            # the patch term does not depend on the deltas through any differentiable path
            for p, d in zip(batch, pred.data):
                if not np.all(np.isfinite(d)):
                    extra = math.nan       # reported as divergence by the epoch loop
                    break
                pb = C.decode_attention(d, arch, p.track.ref_center if p.track else None)
                gb = clip_box(Box(p.position[0], p.position[1], arch.attn_box, arch.attn_box),
                              arch.patch_size, arch.patch_size)
                U, V, N = patch_term(p.patch, pb, gb, side)
                if N > 0:
                    extra += float(((U - V) ** 2).sum()) / N
            extra /= len(batch)
        total = loss + extra
        v = total.item()
        return total, {"L": v, "Latt": v}, len(batch), plan

    return fn


def train_attention(pairs, cfg: TrainConfig = TrainConfig(), arch: C.ArchConfig = C.ArchConfig(),
                    init: C.AttentionModel | None = None) -> TrainResult:
    if not pairs:
        raise ValueError("train_attention needs at least one pair")
    rng = np.random.default_rng(cfg.seed)
    model = init or C.AttentionModel(C.init_attention(arch, rng), arch)
    fn = _attention_loss_fn(model)
    epochs = cfg.attn_epochs if cfg.attn_epochs is not None else cfg.max_epochs
    if cfg.attn_learning_rate is not None:
        cfg = replace(cfg, learning_rate=cfg.attn_learning_rate)
    history, audits = _run(model.params, _batches(pairs, cfg.batch_frames), fn, cfg, rng, epochs, "attention")
    return TrainResult(model, history, 0, audits)


# -- detector ------------------------------------------------------------------------------

@dataclass
class _PairAnchors:
    anchors: np.ndarray          # [A, 4]: positives first, then the negative pool
    pos: np.ndarray              # indices of positive anchors
    neg_pool: np.ndarray         # indices eligible as negatives
    cells: tuple                 # (v, u, k) feature cell and scale per anchor


def region_anchors(region: Box, arch: C.ArchConfig) -> np.ndarray:
    ref = region if arch.anchor_reference == "attention" else C.search_box(arch)
    return anchor_array(C.snapped_region(region, arch.anchor_stride), arch.anchor_scales,
                        arch.anchor_stride, ref, arch.anchor_min_overlap, arch.anchor_overlap)


def pair_anchors(pair: TrainingPair, region: Box, arch: C.ArchConfig, cfg: TrainConfig) -> _PairAnchors:
    """Positives: the ``n_pos`` region anchors overlapping the ground-truth box most
    (IoU >= ``pos_iou``). Negatives: anchors with IoU < ``neg_iou``, drawn from the
    region or from the whole search patch (``cfg.neg_region``)."""
    gt = np.array([pair.position[0], pair.position[1], arch.box_size, arch.box_size])
    A = region_anchors(region, arch)
    ov = iou_matrix(A, gt) if len(A) else np.zeros(0)
    order = np.argsort(-ov, kind="stable")[:cfg.n_pos]
    pos = np.sort(order[ov[order] >= cfg.pos_iou])
    N = region_anchors(C.search_box(arch), arch) if cfg.neg_region == "search" else A
    negs = N[iou_matrix(N, gt) < cfg.neg_iou] if len(N) else N
    anchors = np.concatenate([A[pos], negs]) if len(pos) + len(negs) else np.zeros((0, 4))
    F = arch.level_sizes()[-2]
    cells = C.anchor_cells(anchors, arch, F) if len(anchors) else (np.zeros(0, int),) * 3
    return _PairAnchors(anchors, np.arange(len(pos)), np.arange(len(pos), len(anchors)), cells)


def teacher_region(pair: TrainingPair, arch: C.ArchConfig) -> Box:
    if not arch.use_attention:
        return C.search_box(arch)
    return clip_box(Box(pair.position[0], pair.position[1], arch.attn_box, arch.attn_box),
                    arch.patch_size, arch.patch_size)


def _margin_grads(P, arch, layer_acts: dict, labels):
    out = {}
    for name, act in layer_acts.items():
        g = C.score_gap_gradients(P, arch, name, act, labels)
        out[name] = (g, np.zeros_like(g))
    return out


def _detector_loss_fn(P, arch: C.ArchConfig, cfg: TrainConfig, anchors_of):
    """Loss closure over one batch of pairs from a single track.

    ``anchors_of(pair)`` returns the pair's :class:`_PairAnchors`. ``plan``
    fixes the sampled anchors and the margin normalizers so the closure can
    be re-evaluated for gradient audits.
    """
    W = arch.window if arch.use_lstm else 1
    rpn_cfg = replace(cfg.margin, layers=("input",))

    def fn(batch, rng, plan):
        track = batch[0].track
        if plan is None:
            plan = {"skipped": 0}
        need = sorted({f for p in batch for f in range(p.frame_index - W + 1, p.frame_index + 1) if f >= 0})
        row_of = {f: i for i, f in enumerate(need)}
        merged = C.backbone(P, arch, track.patches[need][:, None])
        rpn = C.rpn_logits(P, merged)
        F = merged.shape[-1]

        if "samples" not in plan:
            sel_anchor, sel_label, sel_pair, sel_cell = [], [], [], []
            for pi, p in enumerate(batch):
                pa = anchors_of(p)
                if len(pa.pos) == 0:
                    plan["skipped"] += 1
                    continue
                n_neg = min(len(pa.neg_pool), int(round(cfg.neg_ratio * len(pa.pos))))
                neg = np.zeros(0, dtype=int)
                if n_neg:
                    v, u, k = (c[pa.neg_pool] for c in pa.cells)
                    obj = rpn.data[row_of[p.frame_index], k, v, u]
                    n_hard = min(n_neg, int(round(cfg.hard_neg_frac * n_neg)))
                    hard = pa.neg_pool[np.argsort(-obj, kind="stable")[:n_hard]]
                    rest = np.setdiff1d(pa.neg_pool, hard)
                    soft = rng.choice(rest, size=min(len(rest), n_neg - n_hard), replace=False) if len(rest) else rest
                    neg = np.sort(np.concatenate([hard, soft]).astype(int))
                idx = np.concatenate([pa.pos, neg])
                sel_anchor.append(pa.anchors[idx])
                sel_label.append(np.r_[np.ones(len(pa.pos), int), np.zeros(len(neg), int)])
                sel_pair.append(np.full(len(idx), pi))
                sel_cell.append(np.stack([c[idx] for c in pa.cells], axis=1))
            if not sel_anchor:
                plan["samples"] = None
            else:
                plan["samples"] = (np.concatenate(sel_anchor), np.concatenate(sel_label),
                                   np.concatenate(sel_pair), np.concatenate(sel_cell))
        if plan["samples"] is None:
            zero = Tensor(np.zeros(()))
            return zero, {"L": 0.0, "Lcls": 0.0, "Lmask": 0.0, "Lbox": 0.0}, 0, plan

        anchors, labels, pair_idx, cells = plan["samples"]
        n = len(labels)
        cur_rows = np.array([row_of[batch[i].frame_index] for i in pair_idx])

        # proposal stage: score pair (0, s) per anchor
        s = rpn[cur_rows, cells[:, 2], cells[:, 0], cells[:, 1]]
        f_rpn = nd.stack([Tensor(np.zeros(n)), s], axis=1)
        if "rpn_grads" not in plan:
            w = P["det.rpn.w"].data[:, :, 0, 0][cells[:, 2]]
            plan["rpn_grads"] = {"input": (w, np.zeros_like(w))}
        l_rpn = margin_cls_loss(f_rpn, plan["rpn_grads"], labels, rpn_cfg)

        # ROI features for every (sample, window slot) that exists
        frames = np.array([batch[i].frame_index for i in pair_idx])
        slot_frames = frames[:, None] - np.arange(W - 1, -1, -1)[None, :]      # [n, W], oldest first
        valid = slot_frames >= 0
        si, ti = np.nonzero(valid)
        rows = np.array([row_of[f] for f in slot_frames[si, ti]])
        flat = merged[C.roi_index(anchors[si], rows, arch, F)]
        flat = flat.reshape(len(si), -1)
        feats = nd.relu(nd.affine(flat, P["det.fc.w"], P["det.fc.b"]))
        slot_pos = np.full((n, W), len(si))
        slot_pos[si, ti] = np.arange(len(si))
        cur_feat = feats[slot_pos[:, -1]]
        if arch.use_lstm:
            padded = nd.concat([feats, Tensor(np.zeros((1, arch.feature_dim)))], axis=0)
            window = padded[slot_pos]                                          # [n, W, D]
            hidden = C.head_hidden(P, arch, window)
            acts = {"input": window.data, "hidden": hidden.data}
        else:
            hidden = cur_feat
            acts = {"input": flat.data[slot_pos[:, -1]], "hidden": hidden.data}
        f = C.cls_scores(P, hidden)
        if "cls_grads" not in plan:
            plan["cls_grads"] = _margin_grads(P, arch, {k: acts[k] for k in cfg.margin.layers}, labels)
        l_cls = (margin_cls_loss(f, plan["cls_grads"], labels, cfg.margin) + l_rpn) * (1.0 / n)

        pos = np.flatnonzero(labels == 1)
        pa = anchors[pos]
        gxy = np.array([batch[i].position for i in pair_idx[pos]])
        target = np.stack([(gxy[:, 0] - pa[:, 0]) / pa[:, 2], (gxy[:, 1] - pa[:, 1]) / pa[:, 3]], axis=1)
        pred = C.box_deltas(P, hidden[pos])
        l_box = box_loss(pred, target * arch.box_target_scale) * (1.0 / len(pos))

        pix = C.mask_pixel_features(P, arch, cur_feat[pos])
        y = disk_masks(pa, gxy, arch.mask_size, arch.mask_radius).reshape(-1)
        l_mask = mask_loss(pix, P["det.mask_cls.w"], y, cfg.mask)

        total = combined_loss(l_cls, l_mask, l_box, cfg.weights)
        parts = {"L": total.item(), "Lcls": l_cls.item(), "Lmask": l_mask.item(), "Lbox": l_box.item()}
        return total, parts, len(batch) - plan["skipped"], plan

    return fn


def train_detector(pairs, cfg: TrainConfig = TrainConfig(), arch: C.ArchConfig = C.ArchConfig(),
                   init: C.DetectorModel | None = None, regions: dict | None = None) -> TrainResult:
    """Train the detector on teacher regions (the ground-truth attention boxes).

    ``regions`` may map ``id(pair)`` to a region box to override the teacher.
    """
    if not pairs:
        raise ValueError("train_detector needs at least one pair")
    rng = np.random.default_rng(cfg.seed + 1)
    model = init or C.DetectorModel(C.init_detector(arch, rng), arch)
    cache = {}

    def anchors_of(p):
        key = id(p)
        if key not in cache:
            region = regions[key] if regions and key in regions else teacher_region(p, arch)
            cache[key] = pair_anchors(p, region, arch, cfg)
        return cache[key]

    skipped = sum(1 for p in pairs if len(anchors_of(p).pos) == 0)
    if skipped:
        log.warning("train_detector: %d pairs without a positive anchor are skipped", skipped)
    fn = _detector_loss_fn(model.params, arch, cfg, anchors_of)
    history, audits = _run(model.params, _batches(pairs, cfg.batch_frames), fn, cfg, rng, cfg.max_epochs, "detector")
    return TrainResult(model, history, skipped, audits)


def predicted_regions(model: C.AttentionModel, pairs) -> dict:
    out = {}
    for p in pairs:
        ref = p.track.ref_center if p.track else None
        out[id(p)] = C.attention_forward(model, p.patch, ref)
    return out


def _joint_loss_fn(att: C.AttentionModel, P, arch, cfg, anchors_of):
    fa = _attention_loss_fn(att)
    fd = _detector_loss_fn(P, arch, cfg, anchors_of)

    def fn(batch, rng, plan):
        plan = plan or {}
        la, pa, _, _ = fa(batch, rng, None)
        ld, pd, w, plan["det"] = fd(batch, rng, plan.get("det"))
        total = ld + la
        parts = dict(pd, Latt=pa["Latt"], L=total.item())
        return total, parts, w, plan

    return fn


@dataclass
class FullResult:
    model: C.CascadeModel
    attention: TrainResult | None
    detector: TrainResult
    joint: list = field(default_factory=list)

    @property
    def history(self) -> list:
        """Combined per-epoch history: attention stage, detector stage, then joint epochs."""
        rows = []
        for stage in (self.attention, self.detector):
            if stage is not None:
                rows.extend(stage.history)
        rows.extend(self.joint)
        return [dict(r, epoch=i) for i, r in enumerate(rows)]


def train_full(pairs, cfg: TrainConfig = TrainConfig(), arch: C.ArchConfig = C.ArchConfig(),
               attention: C.AttentionModel | None = None) -> FullResult:
    """Staged training (attention, then detector on teacher regions) followed by
    ``cfg.joint_epochs`` epochs minimizing both objectives, with detector
    anchors taken from the attention network's current predictions.

    A pretrained ``attention`` model is reused as is.
    """
    att_res = None
    if arch.use_attention and attention is None:
        att_res = train_attention(pairs, cfg, arch)
        attention = att_res.model
    det_res = train_detector(pairs, cfg, arch)
    joint = []
    if cfg.joint_epochs > 0 and arch.use_attention:
        params = OrderedDict(list(attention.params.items()) + list(det_res.model.params.items()))
        regions = predicted_regions(attention, pairs)
        cache = {}

        def anchors_of(p):
            if id(p) not in cache:
                cache[id(p)] = pair_anchors(p, regions[id(p)], arch, cfg)
            return cache[id(p)]

        fn = _joint_loss_fn(attention, det_res.model.params, arch, cfg, anchors_of)
        rng = np.random.default_rng(cfg.seed + 2)
        joint, _ = _run(params, _batches(pairs, cfg.batch_frames), fn,
                        replace(cfg, patience=cfg.joint_epochs), rng, cfg.joint_epochs, "joint")
        joint = joint[1:]
    model = C.CascadeModel(attention if arch.use_attention else None, det_res.model, arch)
    return FullResult(model, att_res, det_res, joint)
