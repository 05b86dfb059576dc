"""Model assembly and forward passes for the cascade tracker.

The cascade runs per landmark on a fixed search patch centered at the
first-frame annotation:

1. the attention network regresses a reduced search box from the patch;
2. the detector (conv backbone, two-scale merge, proposal scoring on an
   anchor grid, ROI features) scores anchors inside that box and emits a
   class score, a center refinement and a mask per candidate;
3. the classification and box heads read an LSTM summary of the candidate's
   features over the last ``window`` frames (the mask head does not);
4. :mod:`cascadetrack.temporal_select` picks one candidate per frame.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict, deque
from dataclasses import dataclass, fields

import numpy as np

from . import ndtensor as nd
from .boxgeom import Box, BoxDelta, anchor_array, clip_box, decode
from .dataio import crop_patch, patch_origin
from .ndtensor import Tensor, conv_output_size
from .recurrent import LstmParams, lstm_window
from .temporal_select import SelectionConfig, TrackLost, select_index

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ArchConfig:
    patch_size: int = 100
    attn_channels: tuple = (8, 16, 32)
    attn_keypoints: int = 8             # spatial-softmax channels feeding the box affine
    attn_softmax_gain: float = 10.0
    attn_box: float = 64.0               # ground-truth attention box side (px)
    channels: tuple = (8, 16, 32)
    merge_channels: int = 16
    anchor_scales: tuple = (16, 20, 24, 28)
    anchor_stride: int = 4
    anchor_min_overlap: float = 0.7
    anchor_overlap: str = "coverage"     # "coverage" or "iou"
    anchor_reference: str = "attention"  # "attention" or "search"
    roi_size: int = 7
    feature_dim: int = 128
    box_size: float = 20.0
    mask_size: int = 20
    mask_dim: int = 4
    mask_radius: float = 6.0
    lstm_hidden: int = 64
    lstm_layers: int = 1
    window: int = 5
    use_attention: bool = True
    use_lstm: bool = True
    pre_top_k: int = 32
    top_k: int = 8
    nms_iou: float = 0.3                 # per-landmark suppression; 1.0 keeps every candidate
    box_target_scale: float = 10.0

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("backbone needs at least two conv levels")
        if self.anchor_overlap not in ("coverage", "iou"):
            raise ValueError(f"anchor_overlap must be 'coverage' or 'iou', got {self.anchor_overlap!r}")
        if self.anchor_reference not in ("attention", "search"):
            raise ValueError(f"anchor_reference must be 'attention' or 'search', got {self.anchor_reference!r}")

    @property
    def feature_stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def level_sizes(self, channels=None) -> list:
        n, out = self.patch_size, []
        for _ in channels or self.channels:
            n = conv_output_size(n, 3, 2, 1)
            out.append(n)
        return out

    @property
    def head_dim(self) -> int:
        return self.lstm_hidden if self.use_lstm else self.feature_dim

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**kw)


@dataclass
class Candidate:
    box: Box
    score: float
    mask: np.ndarray
    feature: np.ndarray
    anchor_index: int = -1


def search_box(cfg: ArchConfig) -> Box:
    c = (cfg.patch_size - 1) / 2
    return Box(c, c, float(cfg.patch_size), float(cfg.patch_size))


# -- parameter initialization ---------------------------------------------------

def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _conv_params(out, prefix, channels, rng, in_ch=1):
    for i, ch in enumerate(channels, 1):
        fan = in_ch * 9
        out[f"{prefix}.c{i}.w"] = _uniform(rng, (ch, in_ch, 3, 3), fan)
        out[f"{prefix}.c{i}.b"] = _uniform(rng, (ch,), fan)
        in_ch = ch


def init_attention(cfg: ArchConfig, rng: np.random.Generator) -> OrderedDict:
    p = OrderedDict()
    _conv_params(p, "attn", cfg.attn_channels, rng)
    K, c_last = cfg.attn_keypoints, cfg.attn_channels[-1]
    p["attn.kp.w"] = _uniform(rng, (K, c_last, 1, 1), c_last)
    p["attn.kp.b"] = _uniform(rng, (K,), c_last)
    p["attn.out.w"] = _uniform(rng, (4, 2 * K), 2 * K)
    p["attn.out.b"] = _uniform(rng, (4,), 2 * K)
    return p


def init_detector(cfg: ArchConfig, rng: np.random.Generator) -> OrderedDict:
    p = OrderedDict()
    _conv_params(p, "det", cfg.channels, rng)
    cm, c_lo, c_hi = cfg.merge_channels, cfg.channels[-2], cfg.channels[-1]
    p["det.lat_lo.w"] = _uniform(rng, (cm, c_lo, 1, 1), c_lo)
    p["det.lat_lo.b"] = _uniform(rng, (cm,), c_lo)
    p["det.lat_hi.w"] = _uniform(rng, (cm, c_hi, 1, 1), c_hi)
    p["det.lat_hi.b"] = _uniform(rng, (cm,), c_hi)
    n_s = len(cfg.anchor_scales)
    p["det.rpn.w"] = _uniform(rng, (n_s, cm, 1, 1), cm)
    p["det.rpn.b"] = _uniform(rng, (n_s,), cm)
    roi_flat = cm * cfg.roi_size * cfg.roi_size
    p["det.fc.w"] = _uniform(rng, (cfg.feature_dim, roi_flat), roi_flat)
    p["det.fc.b"] = _uniform(rng, (cfg.feature_dim,), roi_flat)
    if cfg.use_lstm:
        n_in = cfg.feature_dim
        for layer in range(cfg.lstm_layers):
            lp = LstmParams.init(n_in, cfg.lstm_hidden, rng)
            for k, v in lp.tensors().items():
                p[f"det.lstm{layer}.{k}"] = v
            n_in = cfg.lstm_hidden
    hd = cfg.head_dim
    p["det.cls.w"] = _uniform(rng, (2, hd), hd)
    p["det.cls.b"] = _uniform(rng, (2,), hd)
    p["det.box.w"] = _uniform(rng, (2, hd), hd)
    p["det.box.b"] = _uniform(rng, (2,), hd)
    n_pix = cfg.mask_size * cfg.mask_size * cfg.mask_dim
    p["det.mask.w"] = _uniform(rng, (n_pix, cfg.feature_dim), cfg.feature_dim)
    p["det.mask.b"] = _uniform(rng, (n_pix,), cfg.feature_dim)
    p["det.mask_cls.w"] = _uniform(rng, (2, cfg.mask_dim), cfg.mask_dim)
    return p


def lstm_params(P, cfg: ArchConfig) -> list:
    return [LstmParams(P[f"det.lstm{i}.w_ih"], P[f"det.lstm{i}.w_hh"],
                       P[f"det.lstm{i}.b_ih"], P[f"det.lstm{i}.b_hh"])
            for i in range(cfg.lstm_layers)]


def constants(P) -> OrderedDict:
    """Same parameters as graph constants (no gradient)."""
    return OrderedDict((k, Tensor(v.data)) for k, v in P.items())


# -- attention network -----------------------------------------------------------

def standardize(x) -> Tensor:
    """Per-patch zero mean, unit variance (patches are ``[B, 1, H, W]``); a constant input."""
    a = np.asarray(x.data if isinstance(x, Tensor) else x)
    mu = a.mean(axis=(1, 2, 3), keepdims=True)
    sd = a.std(axis=(1, 2, 3), keepdims=True)
    return Tensor((a - mu) / np.maximum(sd, 1e-6))


def attention_deltas(P, cfg: ArchConfig, x) -> Tensor:
    """Box deltas ``[B, 4]`` for patches ``[B, 1, P, P]``.

    Each keypoint channel is turned into a spatial distribution by a softmax
    over the map; its expected (x, y) position, in units of ``attn_box``
    from the patch center, feeds the final affine layer.
    """
    h = standardize(x)
    for i in range(1, len(cfg.attn_channels) + 1):
        h = nd.relu(nd.conv2d(h, P[f"attn.c{i}.w"], 2, 1, P[f"attn.c{i}.b"]))
    z = nd.conv2d(h, P["attn.kp.w"], 1, 0, P["attn.kp.b"])
    B, K, F, _ = z.shape
    z = z.reshape(B * K, F * F) * cfg.attn_softmax_gain
    e = nd.exp(z - z.data.max(axis=1, keepdims=True).repeat(F * F, axis=1))
    prob = e / nd.expand(e.sum(axis=1, keepdims=True), (B * K, F * F))
    stride = 2 ** len(cfg.attn_channels)
    coord = (np.arange(F) * stride - cfg.patch_size / 2) / cfg.attn_box
    gx = np.tile(coord, F)
    gy = np.repeat(coord, F)
    ex = (prob @ Tensor(gx.astype(prob.data.dtype))).reshape(B, K)
    ey = (prob @ Tensor(gy.astype(prob.data.dtype))).reshape(B, K)
    return nd.affine(nd.concat([ex, ey], axis=1), P["attn.out.w"], P["attn.out.b"])


def attention_reference(cfg: ArchConfig, center=None) -> Box:
    """Box the attention deltas are relative to: ``attn_box`` square at the first-frame landmark."""
    if center is None:
        center = (cfg.patch_size // 2, cfg.patch_size // 2)
    return Box(float(center[0]), float(center[1]), cfg.attn_box, cfg.attn_box)


def decode_attention(delta, cfg: ArchConfig, center=None) -> Box:
    d = np.clip(np.asarray(delta, dtype=np.float64), -5, 5)
    box = decode(BoxDelta(*map(float, d)), attention_reference(cfg, center))
    return clip_box(box, cfg.patch_size, cfg.patch_size)


# -- detector pieces ----------------------------------------------------------------

def backbone(P, cfg: ArchConfig, x) -> Tensor:
    """Merged feature map ``[B, merge_channels, F, F]`` at ``feature_stride``."""
    h = standardize(x)
    levels = []
    for i in range(1, len(cfg.channels) + 1):
        h = nd.relu(nd.conv2d(h, P[f"det.c{i}.w"], 2, 1, P[f"det.c{i}.b"]))
        levels.append(h)
    lo = nd.conv2d(levels[-2], P["det.lat_lo.w"], 1, 0, P["det.lat_lo.b"])
    hi = nd.conv2d(levels[-1], P["det.lat_hi.w"], 1, 0, P["det.lat_hi.b"])
    up = nd.upsample_nearest(hi, 2)
    F = lo.shape[-1]
    return lo + up[:, :, :F, :F]


def rpn_logits(P, merged) -> Tensor:
    return nd.conv2d(merged, P["det.rpn.w"], 1, 0, P["det.rpn.b"])


def anchor_cells(anchors: np.ndarray, cfg: ArchConfig, F: int):
    """Feature-map cell (row, col) under each anchor center and its scale index."""
    s = cfg.feature_stride
    u = np.clip(np.floor(anchors[:, 0] / s + 0.5).astype(int), 0, F - 1)
    v = np.clip(np.floor(anchors[:, 1] / s + 0.5).astype(int), 0, F - 1)
    scales = np.asarray(cfg.anchor_scales, dtype=np.float64)
    k = np.abs(anchors[:, 2:3] - scales[None, :]).argmin(axis=1)
    return v, u, k


def roi_index(anchors: np.ndarray, batch_idx: np.ndarray, cfg: ArchConfig, F: int):
    """Nearest-neighbour crop-and-resize index into ``[B, C, F, F]`` (result ``[n, R, R, C]``)."""
    R, s = cfg.roi_size, cfg.feature_stride
    frac = (np.arange(R) + 0.5) / R
    x0 = anchors[:, 0] - anchors[:, 2] / 2
    y0 = anchors[:, 1] - anchors[:, 3] / 2
    px = x0[:, None] + frac[None, :] * anchors[:, 2:3]
    py = y0[:, None] + frac[None, :] * anchors[:, 3:4]
    ux = np.clip(np.floor(px / s + 0.5).astype(int), 0, F - 1)
    vy = np.clip(np.floor(py / s + 0.5).astype(int), 0, F - 1)
    b = np.asarray(batch_idx, dtype=int)
    return (b[:, None, None], slice(None), vy[:, :, None], ux[:, None, :])


def roi_features(P, merged, idx) -> Tensor:
    crops = merged[idx]
    flat = crops.reshape(crops.shape[0], -1)
    return nd.relu(nd.affine(flat, P["det.fc.w"], P["det.fc.b"]))


def head_hidden(P, cfg: ArchConfig, feats) -> Tensor:
    """What the classification and box heads read: LSTM summary or raw feature.

    ``feats`` is ``[n, window, feature_dim]`` with LSTM, ``[n, feature_dim]`` without.
    """
    if cfg.use_lstm:
        return lstm_window(lstm_params(P, cfg), feats)
    return feats


def cls_scores(P, hidden) -> Tensor:
    return nd.affine(hidden, P["det.cls.w"], P["det.cls.b"])


def box_deltas(P, hidden) -> Tensor:
    return nd.affine(hidden, P["det.box.w"], P["det.box.b"])


def mask_pixel_features(P, cfg: ArchConfig, feature) -> Tensor:
    """Per-pixel mask features ``[n * mask_size**2, mask_dim]``."""
    pix = nd.affine(feature, P["det.mask.w"], P["det.mask.b"])
    return pix.reshape(-1, cfg.mask_dim)


def mask_probs(P, cfg: ArchConfig, feature) -> np.ndarray:
    x = mask_pixel_features(P, cfg, feature).data
    logits = x @ P["det.mask_cls.w"].data.T
    prob = nd._sigmoid_np(logits[:, 1] - logits[:, 0])
    return prob.reshape(-1, cfg.mask_size, cfg.mask_size)


def score_from_logits(f: np.ndarray) -> np.ndarray:
    return nd._sigmoid_np(f[:, 1] - f[:, 0])


def cls_from_layer(P, cfg: ArchConfig, layer: str, act) -> Tensor:
    """Classification scores as a function of one layer's activations."""
    if layer == "hidden":
        return cls_scores(P, act)
    if layer == "input":
        if cfg.use_lstm:
            return cls_scores(P, lstm_window(lstm_params(P, cfg), act))
        return cls_scores(P, nd.relu(nd.affine(act, P["det.fc.w"], P["det.fc.b"])))
    raise KeyError(f"unknown layer {layer!r}")


def score_gap_gradients(P, cfg: ArchConfig, layer: str, act: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample gradient of (f_other - f_true) with respect to a layer, ``[n, d]``."""
    with nd.enable_grad():
        a = Tensor(np.array(act, dtype=np.float64), requires_grad=True)
        f = cls_from_layer(constants(P), cfg, layer, a)
        rows = np.arange(len(labels))
        gap = (f[rows, 1 - labels] - f[rows, labels]).sum()
        nd.backward(gap)
    return a.grad.reshape(len(labels), -1)


# -- models ----------------------------------------------------------------------------

@dataclass
class AttentionModel:
    params: OrderedDict
    cfg: ArchConfig

    def forward_batch(self, patches) -> Tensor:
        x = np.asarray(patches)
        return attention_deltas(self.params, self.cfg, x.reshape(x.shape[0], 1, *x.shape[-2:]))


def attention_forward(m: AttentionModel, patch, center=None) -> Box:
    """Attention box for one patch; ``center`` is the first-frame landmark in patch
    coordinates (default: the patch center pixel)."""
    patch = np.asarray(patch)
    if patch.shape != (m.cfg.patch_size, m.cfg.patch_size):
        raise ValueError(f"attention input must be {m.cfg.patch_size}x{m.cfg.patch_size}, got {patch.shape}")
    with nd.no_grad():
        d = m.forward_batch(patch[None]).data[0]
    return decode_attention(d, m.cfg, center)


@dataclass
class DetectorModel:
    params: OrderedDict
    cfg: ArchConfig


@dataclass
class CascadeModel:
    attention: AttentionModel | None
    detector: DetectorModel
    cfg: ArchConfig

    def params(self) -> OrderedDict:
        out = OrderedDict()
        if self.attention is not None:
            out.update(self.attention.params)
        out.update(self.detector.params)
        return out

    def with_dtype(self, dtype) -> "CascadeModel":
        """Copy with parameters cast to ``dtype`` (float32 for speed runs)."""
        def cast(P):
            return OrderedDict((k, Tensor(v.data.astype(dtype))) for k, v in P.items())
        att = AttentionModel(cast(self.attention.params), self.cfg) if self.attention else None
        return CascadeModel(att, DetectorModel(cast(self.detector.params), self.cfg), self.cfg)


def snapped_region(box: Box, stride: int) -> Box:
    """Same box with its center moved to the nearest multiple of ``stride``."""
    return Box(round(box.cx / stride) * stride, round(box.cy / stride) * stride, box.w, box.h)


def proposal_anchors(cfg: ArchConfig, attn: Box) -> np.ndarray:
    """Anchors inside the attention box that pass the overlap filter."""
    ref = attn if cfg.anchor_reference == "attention" else search_box(cfg)
    region = snapped_region(attn, cfg.anchor_stride)
    return anchor_array(region, cfg.anchor_scales, cfg.anchor_stride, ref,
                        cfg.anchor_min_overlap, cfg.anchor_overlap)


def _window_features(P, cfg, maps: list, anchors: np.ndarray) -> np.ndarray:
    """Features at ``anchors`` in each cached map (oldest first), zero-padded to the window."""
    n, W = len(anchors), cfg.window
    F = maps[-1].shape[-1]
    feats = np.zeros((n, W, cfg.feature_dim), dtype=maps[-1].dtype)
    stack = np.stack(maps, axis=0)                       # [T, C, F, F]
    T = len(maps)
    b = np.repeat(np.arange(T), n)
    a = np.tile(anchors, (T, 1))
    f = roi_features(P, Tensor(stack), roi_index(a, b, cfg, F)).data.reshape(T, n, -1)
    feats[:, W - T:, :] = f.transpose(1, 0, 2)
    return feats


def detect(P, cfg: ArchConfig, maps: list, attn: Box) -> list:
    """Candidates for the newest map in ``maps`` (previous maps feed the LSTM)."""
    anchors = proposal_anchors(cfg, attn)
    if len(anchors) == 0:
        return []
    cur = maps[-1]
    F = cur.shape[-1]
    with nd.no_grad():
        rpn = rpn_logits(P, Tensor(cur[None])).data[0]
        v, u, k = anchor_cells(anchors, cfg, F)
        obj = rpn[k, v, u]
        order = np.argsort(-obj, kind="stable")[:cfg.pre_top_k]
        order.sort()                                      # keep anchor index order for tie-breaking
        sel = anchors[order]
        maps = maps[-cfg.window:] if cfg.use_lstm else maps[-1:]
        if cfg.use_lstm:
            win = _window_features(P, cfg, maps, sel)
            feature = win[:, -1, :]
            hidden = head_hidden(P, cfg, Tensor(win))
        else:
            feature = roi_features(P, Tensor(cur[None]), roi_index(sel, np.zeros(len(sel), int), cfg, F)).data
            hidden = Tensor(feature)
        f = cls_scores(P, hidden).data
        d = box_deltas(P, hidden).data / cfg.box_target_scale
        masks = mask_probs(P, cfg, Tensor(feature))
    scores = score_from_logits(f)
    lim = cfg.patch_size - 1
    cx = np.clip(sel[:, 0] + d[:, 0] * sel[:, 2], 0, lim)
    cy = np.clip(sel[:, 1] + d[:, 1] * sel[:, 3], 0, lim)
    rank = suppress(np.stack([cx, cy], axis=1), scores, cfg.box_size, cfg.nms_iou, cfg.top_k)
    return [Candidate(Box(float(cx[r]), float(cy[r]), cfg.box_size, cfg.box_size), float(scores[r]),
                      masks[r], feature[r], int(order[r])) for r in rank]


def suppress(centers: np.ndarray, scores: np.ndarray, size: float, max_iou: float, limit: int) -> list:
    """Greedy suppression of equal-size square boxes, best score first (stable)."""
    keep = []
    for r in np.argsort(-scores, kind="stable"):
        if len(keep) == limit:
            break
        if max_iou < 1.0 and keep:
            dx = np.clip(size - np.abs(centers[keep, 0] - centers[r, 0]), 0, None)
            dy = np.clip(size - np.abs(centers[keep, 1] - centers[r, 1]), 0, None)
            inter = dx * dy
            if np.any(inter / (2 * size * size - inter) > max_iou):
                continue
        keep.append(int(r))
    return keep


def detector_forward(m: DetectorModel, patch, attn: Box, history: list | None = None) -> list:
    """Score-sorted candidates (at most ``top_k``) for one patch.

    ``history`` holds merged feature maps of earlier frames (oldest first);
    without it the LSTM window is zero-padded.
    """
    patch = np.asarray(patch)
    with nd.no_grad():
        merged = backbone(m.params, m.cfg, patch[None, None]).data[0]
    return detect(m.params, m.cfg, list(history or []) + [merged], attn)


def lstm_refine(P, cfg: ArchConfig, windows) -> tuple:
    """Refined (score, center delta) per candidate from ``[n, window, feature_dim]`` windows."""
    with nd.no_grad():
        h = lstm_window(lstm_params(P, cfg), Tensor(np.asarray(windows)))
        f = cls_scores(P, h).data
        d = box_deltas(P, h).data / cfg.box_target_scale
    return score_from_logits(f), d


# -- tracking ----------------------------------------------------------------------------

class _LandmarkState:
    def __init__(self, center, window):
        self.center = center
        self.prev = None
        self.ref = None
        self.maps = deque(maxlen=window)
        self.lost_frames = []


class Tracker:
    """Frame-by-frame tracker for every landmark annotated in the first frame.

    ``track_frame`` returns ``{landmark_id: (x, y, score)}`` in frame coordinates.
    """

    def __init__(self, model: CascadeModel, first_frame, positions: dict,
                 select_cfg: SelectionConfig = SelectionConfig(), dtype=np.float32):
        if not positions:
            raise ValueError("tracking needs at least one first-frame annotation")
        self.model = model.with_dtype(dtype)
        self.cfg = model.cfg
        self.select_cfg = select_cfg
        self.dtype = dtype
        self.frame_index = 0
        self.states = OrderedDict()
        for lid, (x, y) in positions.items():
            st = _LandmarkState((float(x), float(y)), max(1, self.cfg.window))
            ox, oy = self._origin(st)
            st.prev = (float(x) - ox, float(y) - oy)
            st.ref = st.prev
            self.states[lid] = st
        self.last_candidates = {}
        self._push_maps(first_frame)

    def _origin(self, st):
        return patch_origin(st.center, self.cfg.patch_size)

    def _patch(self, frame, st):
        return crop_patch(frame, st.center, self.cfg.patch_size, dtype=self.dtype)

    def _push_maps(self, frame):
        for st in self.states.values():
            self._step_maps(self._patch(frame, st), st)

    def _step_maps(self, patch, st):
        with nd.no_grad():
            merged = backbone(self.model.detector.params, self.cfg, patch[None, None]).data[0]
        st.maps.append(merged)
        return merged

    def attention_box(self, patch, center=None) -> Box:
        if self.model.attention is None or not self.cfg.use_attention:
            return search_box(self.cfg)
        return attention_forward(self.model.attention, patch, center)

    def track_frame(self, frame) -> dict:
        self.frame_index += 1
        out = OrderedDict()
        for lid, st in self.states.items():
            patch = self._patch(frame, st)
            attn = self.attention_box(patch, st.ref)
            self._step_maps(patch, st)
            cands = detect(self.model.detector.params, self.cfg, list(st.maps), attn)
            self.last_candidates[lid] = cands
            try:
                i = select_index([((c.box.cx, c.box.cy), c.score) for c in cands], st.prev, self.select_cfg)
                pos, score = (cands[i].box.cx, cands[i].box.cy), cands[i].score
            except TrackLost:
                log.info("landmark %s: no candidates at frame %d, holding position", lid, self.frame_index)
                st.lost_frames.append(self.frame_index)
                pos, score = st.prev, 0.0
            st.prev = pos
            ox, oy = self._origin(st)
            out[lid] = (pos[0] + ox, pos[1] + oy, score)
        return out


def track_sequence(model: CascadeModel, bundle, select_cfg: SelectionConfig = SelectionConfig(),
                   dtype=np.float32) -> dict:
    """Track every landmark through a bundle; ``{lid: [(frame, x, y, score), ...]}``."""
    positions = {lid: bundle.first_position(lid) for lid in bundle.landmarks}
    tr = Tracker(model, bundle.frames[0], positions, select_cfg, dtype)
    out = {lid: [(0, x, y, 1.0)] for lid, (x, y) in positions.items()}
    for i in range(1, bundle.n_frames):
        res = tr.track_frame(bundle.frames[i])
        for lid, (x, y, s) in res.items():
            out[lid].append((i, x, y, s))
    return out


# -- checkpoints --------------------------------------------------------------------------
#
# File layout: b"CTCK\x01", u32 manifest length, UTF-8 JSON manifest, then one
# ndtensor parameter block holding every named parameter.

_CK_MAGIC = b"CTCK\x01"


def save_model(model: CascadeModel, path, extra: dict | None = None) -> None:
    manifest = {
        "format": 1,
        "arch": model.cfg.to_dict(),
        "has_attention": model.attention is not None,
        "extra": extra or {},
    }
    mb = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC + struct.pack("<I", len(mb)) + mb)
        fh.write(nd.dump_params(model.params()))


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    return _split_checkpoint(buf)[0]


def _split_checkpoint(buf: bytes):
    if buf[:len(_CK_MAGIC)] != _CK_MAGIC:
        raise ValueError("not a cascade checkpoint (bad magic)")
    pos = len(_CK_MAGIC)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    manifest = json.loads(buf[pos:pos + n].decode("utf-8"))
    return manifest, pos + n


def load_model(path) -> CascadeModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    manifest, pos = _split_checkpoint(buf)
    cfg = ArchConfig.from_dict(manifest["arch"])
    params, _ = nd.parse_params(buf, pos)
    att = OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in params.items() if k.startswith("attn."))
    det = OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in params.items() if k.startswith("det."))
    attention = AttentionModel(att, cfg) if manifest.get("has_attention") else None
    return CascadeModel(attention, DetectorModel(det, cfg), cfg)
