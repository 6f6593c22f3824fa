"""Minimal two-stage detector: tiny conv backbone, RPN, and RoI head.

Single-image forward passes throughout (a two-domain training batch is two separate
forwards; there is no batch normalization, so results are identical either way).
RoI features are pooled with area-exact averaging over the feature grid, which is
differentiable w.r.t. the features and reproduces a single cell's vector exactly when
a box aligns with that cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BoundingBox, decode_deltas, encode_deltas, iou_matrix, nms
from .data import DetectionSample, Domain
from .errors import ContractViolationError


@dataclass
class ModelConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 64, 96)
    image_grl_coefficient: float = 0.1
    instance_grl_coefficient: float = 1.0
    icr_hidden_channels: int = 64
    image_classifier_hidden: int = 32
    instance_classifier_hidden: int = 64
    anchor_scales: tuple[float, ...] = (12.0, 20.0, 28.0)
    anchor_ratios: tuple[float, ...] = (1.0,)
    rpn_pre_nms_top_n: int = 96
    rpn_nms_threshold: float = 0.7
    rpn_top_k: int = 16
    rpn_batch: int = 32
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    roi_size: int = 7
    roi_batch: int = 32
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou: float = 0.3
    eval_score_threshold: float = 0.05
    eval_nms_threshold: float = 0.5
    eval_top_k: int = 20


@dataclass
class BackboneFeatures:
    feature_map: torch.Tensor  # (d, h, w)
    stride: int
    mid_map: torch.Tensor | None = None  # stride-4 intermediate, used by auxiliary heads
    mid_stride: int = 4


@dataclass
class ProposalBatch:
    boxes: list[BoundingBox]
    objectness: np.ndarray  # (N,)
    roi_features: torch.Tensor | None = None  # (N, d * P * P), flattened
    class_posteriors: torch.Tensor | None = None  # (N, C + 1), background at index C
    box_deltas: torch.Tensor | None = None  # (N, 4)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class RoiDiagnostics:
    degenerate_boxes: int = 0


class Backbone(nn.Module):
    """Four conv layers, three stride-2 downsamples: image stride 8."""

    stride = 8

    def __init__(self, channels: tuple[int, ...] = (16, 32, 48, 64)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c3, c4, 3, stride=1, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out_channels = c4

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        return self.net(image).squeeze(0)

    def forward_with_mid(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Final stride-8 map plus the stride-4 map after the second conv block."""
        if image.dim() == 3:
            image = image.unsqueeze(0)
        mid = self.net[:4](image)
        return self.net[4:](mid).squeeze(0), mid.squeeze(0)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] -> (3, H, W) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def generate_anchors(
    feature_shape: tuple[int, int],
    stride: int,
    scales: tuple[float, ...],
    ratios: tuple[float, ...],
) -> np.ndarray:
    """One anchor per (cell, scale, ratio), centered at ((u+0.5)*stride, (v+0.5)*stride).

    Row-major over cells, scales-major within a cell; this order matches the RPN head's
    flattened output layout.
    """
    h, w = feature_shape
    anchors = np.zeros((h * w * len(scales) * len(ratios), 4), dtype=np.float64)
    idx = 0
    for v in range(h):
        for u in range(w):
            cx = (u + 0.5) * stride
            cy = (v + 0.5) * stride
            for s in scales:
                for r in ratios:
                    bw = s / math.sqrt(r)
                    bh = s * math.sqrt(r)
                    anchors[idx] = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
                    idx += 1
    return anchors


class RpnHead(nn.Module):
    """3x3 conv trunk with 1x1 objectness and box-delta heads over A anchors per cell."""

    def __init__(self, in_channels: int, num_anchors: int, hidden: int = 64):
        super().__init__()
        self.trunk = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.objectness = nn.Conv2d(hidden, num_anchors, 1)
        self.deltas = nn.Conv2d(hidden, num_anchors * 4, 1)
        self.num_anchors = num_anchors

    def forward(self, feature_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(d, h, w) -> objectness logits (h*w*A,) and deltas (h*w*A, 4) in anchor order."""
        x = F.relu(self.trunk(feature_map.unsqueeze(0)))
        obj = self.objectness(x).squeeze(0)  # (A, h, w)
        dlt = self.deltas(x).squeeze(0)  # (4A, h, w)
        a, h, w = obj.shape
        obj = obj.permute(1, 2, 0).reshape(-1)
        dlt = dlt.reshape(a, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
        return obj, dlt


def roi_extract(
    features: BackboneFeatures,
    boxes: list[BoundingBox] | np.ndarray,
    output_size: int = 7,
    diagnostics: RoiDiagnostics | None = None,
) -> torch.Tensor:
    """Pool a fixed (P, P) grid per box by area-exact averaging over feature cells.

    Returns (N, d, P, P). Zero-area boxes are clamped to a 1-pixel extent and counted
    in `diagnostics`. The pooled values are linear in the feature map, so gradients
    w.r.t. features are exact.
    """
    fmap = features.feature_map
    d, fh, fw = fmap.shape
    stride = features.stride
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64).reshape(-1, 4).copy()
    else:
        arr = np.stack([b.as_array() for b in boxes]) if boxes else np.zeros((0, 4))
    n = arr.shape[0]
    if n == 0:
        return fmap.new_zeros((0, d, output_size, output_size))

    for i in range(n):
        x1, y1, x2, y2 = arr[i]
        if x2 - x1 < 1.0 or y2 - y1 < 1.0:
            if diagnostics is not None:
                diagnostics.degenerate_boxes += 1
            cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            arr[i] = (cx - 0.5, cy - 0.5, cx + 0.5, cy + 0.5)

    pooled = []
    p = output_size
    for x1, y1, x2, y2 in arr:
        # box rectangle in feature-grid coordinates, clamped to the map
        fx1 = min(max(x1 / stride, 0.0), fw - 1e-6)
        fy1 = min(max(y1 / stride, 0.0), fh - 1e-6)
        fx2 = min(max(x2 / stride, fx1 + 1e-6), float(fw))
        fy2 = min(max(y2 / stride, fy1 + 1e-6), float(fh))
        wx = _axis_weights(fx1, fx2, fw, p, fmap)
        wy = _axis_weights(fy1, fy2, fh, p, fmap)
        norm = wy.sum(dim=1)[:, None] * wx.sum(dim=1)[None, :]
        cell = torch.einsum("ph,dhw,qw->dpq", wy, fmap, wx) / norm.clamp_min(1e-12)
        pooled.append(cell)
    return torch.stack(pooled)


def _axis_weights(a: float, b: float, cells: int, bins: int, like: torch.Tensor) -> torch.Tensor:
    """(bins, cells) overlap lengths between each pooling bin's interval and each cell."""
    edges = np.linspace(a, b, bins + 1)
    cell_lo = np.arange(cells, dtype=np.float64)
    lo = np.maximum(edges[:-1, None], cell_lo[None, :])
    hi = np.minimum(edges[1:, None], (cell_lo + 1.0)[None, :])
    w = np.clip(hi - lo, 0.0, None)
    return torch.as_tensor(w, dtype=like.dtype)


class RoiHead(nn.Module):
    """Shared MLP over flattened pooled features with classification and box heads."""

    def __init__(self, in_features: int, num_classes: int, hidden: int = 128):
        super().__init__()
        self.trunk = nn.Linear(in_features, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.box = nn.Linear(hidden, 4)
        self.num_classes = num_classes

    def forward(self, flat_features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = F.relu(self.trunk(flat_features))
        logits = self.cls(x)
        posteriors = torch.softmax(logits, dim=-1)
        return logits, posteriors, self.box(x)


def rpn_objectness_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.float())


def box_regression_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.numel() == 0:
        return pred.new_zeros(())
    return F.smooth_l1_loss(pred, target)


def roi_classification_loss(posteriors: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy computed on posterior rows (uniform rows give ln(num columns))."""
    picked = posteriors.gather(1, labels.view(-1, 1)).clamp_min(1e-12)
    return -torch.log(picked).mean()


class DetectorModel(nn.Module):
    """Backbone + RPN + RoI head, exposing the surfaces the regularizers attach to."""

    def __init__(self, num_classes: int, image_size: int, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.num_classes = num_classes
        self.image_size = image_size
        self.backbone = Backbone(self.config.backbone_channels)
        self.num_anchors_per_cell = len(self.config.anchor_scales) * len(self.config.anchor_ratios)
        self.rpn = RpnHead(self.backbone.out_channels, self.num_anchors_per_cell)
        self.roi_in_features = (
            self.backbone.out_channels * self.config.roi_size * self.config.roi_size
        )
        self.roi_head = RoiHead(self.roi_in_features, num_classes)
        self.roi_diagnostics = RoiDiagnostics()
        self._anchor_cache: dict[tuple[int, int], np.ndarray] = {}

    # --- forward surfaces -------------------------------------------------

    def backbone_forward(
        self, image: np.ndarray | torch.Tensor, with_mid: bool = False
    ) -> BackboneFeatures:
        if isinstance(image, np.ndarray):
            image = image_to_tensor(image)
        if with_mid:
            final, mid = self.backbone.forward_with_mid(image)
            return BackboneFeatures(final, self.backbone.stride, mid_map=mid)
        return BackboneFeatures(self.backbone(image), self.backbone.stride)

    def anchors_for(self, features: BackboneFeatures) -> np.ndarray:
        shape = tuple(features.feature_map.shape[1:])
        if shape not in self._anchor_cache:
            self._anchor_cache[shape] = generate_anchors(
                shape, features.stride, self.config.anchor_scales, self.config.anchor_ratios
            )
        return self._anchor_cache[shape]

    def rpn_propose(
        self,
        features: BackboneFeatures,
        top_k: int | None = None,
        nms_threshold: float | None = None,
    ) -> ProposalBatch:
        """Score anchors, decode, clip, NMS, keep top-K sorted by objectness."""
        cfg = self.config
        top_k = cfg.rpn_top_k if top_k is None else top_k
        nms_threshold = cfg.rpn_nms_threshold if nms_threshold is None else nms_threshold
        obj_logits, deltas = self.rpn(features.feature_map)
        scores = torch.sigmoid(obj_logits).detach().numpy().astype(np.float64)
        anchors = self.anchors_for(features)
        boxes = decode_deltas(anchors, deltas.detach().numpy().astype(np.float64))
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(self.image_size))
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(self.image_size))

        order = np.argsort(-scores, kind="stable")[: cfg.rpn_pre_nms_top_n]
        boxes, scores = boxes[order], scores[order]
        wide = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        boxes, scores = boxes[wide], scores[wide]
        if len(boxes) == 0:
            return ProposalBatch(boxes=[], objectness=np.zeros(0))
        keep = nms(boxes, scores, nms_threshold)[:top_k]
        kept_boxes = [BoundingBox(*boxes[i]) for i in keep]
        return ProposalBatch(boxes=kept_boxes, objectness=scores[keep])

    def fill_roi_outputs(self, features: BackboneFeatures, proposals: ProposalBatch) -> ProposalBatch:
        """Attach pooled features, class posteriors, and box deltas to the proposals."""
        pooled = roi_extract(
            features, proposals.boxes, self.config.roi_size, self.roi_diagnostics
        )
        flat = pooled.reshape(pooled.shape[0], self.roi_in_features)
        _, posteriors, box_deltas = self.roi_head(flat)
        proposals.roi_features = flat
        proposals.class_posteriors = posteriors
        proposals.box_deltas = box_deltas
        return proposals

    # --- training losses ----------------------------------------------------

    def detection_loss(
        self,
        features: BackboneFeatures,
        sample: DetectionSample,
        sampler: np.random.Generator,
    ) -> tuple[torch.Tensor, dict[str, float], ProposalBatch]:
        """Faster R-CNN training loss on a source sample.

        Returns (L_det, per-term floats, the sampled RoI ProposalBatch with outputs
        filled) so the caller can reuse the sampled RoIs for instance alignment.
        """
        if sample.domain is not Domain.SOURCE:
            raise ContractViolationError("detection_loss requires a source-domain sample")
        gt_boxes = np.stack([inst.box.as_array() for inst in sample.instances])
        gt_classes = np.array([inst.class_id for inst in sample.instances], dtype=np.int64)

        obj_logits, deltas = self.rpn(features.feature_map)
        anchors = self.anchors_for(features)
        l_rpn_obj, l_rpn_box = self._rpn_losses(
            obj_logits, deltas, anchors, gt_boxes, sampler
        )

        proposals = self.rpn_propose(features)
        roi_boxes, roi_labels, roi_targets = self._sample_rois(
            proposals, gt_boxes, gt_classes, sampler
        )
        batch = ProposalBatch(
            boxes=[BoundingBox(*b) for b in roi_boxes],
            objectness=np.zeros(len(roi_boxes)),
        )
        self.fill_roi_outputs(features, batch)
        labels_t = torch.from_numpy(roi_labels)
        l_roi_cls = roi_classification_loss(batch.class_posteriors, labels_t)
        fg = roi_labels < self.num_classes
        if fg.any():
            pred_fg = batch.box_deltas[torch.from_numpy(np.nonzero(fg)[0])]
            target_fg = torch.from_numpy(roi_targets[fg]).float()
            l_roi_box = box_regression_loss(pred_fg, target_fg)
        else:
            l_roi_box = features.feature_map.new_zeros(())
        total = l_rpn_obj + l_rpn_box + l_roi_cls + l_roi_box
        parts = {
            "rpn_obj": float(l_rpn_obj.detach()),
            "rpn_box": float(l_rpn_box.detach()),
            "roi_cls": float(l_roi_cls.detach()),
            "roi_box": float(l_roi_box.detach()),
        }
        return total, parts, batch

    def _rpn_losses(self, obj_logits, deltas, anchors, gt_boxes, sampler):
        cfg = self.config
        ious = iou_matrix(anchors, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        labels = np.full(len(anchors), -1, dtype=np.int64)  # -1 = ignore
        labels[best_iou < cfg.rpn_bg_iou] = 0
        labels[best_iou >= cfg.rpn_fg_iou] = 1
        labels[ious.argmax(axis=0)] = 1  # best anchor per GT is always foreground

        fg_idx = np.nonzero(labels == 1)[0]
        bg_idx = np.nonzero(labels == 0)[0]
        max_fg = cfg.rpn_batch // 2
        if len(fg_idx) > max_fg:
            fg_idx = sampler.choice(fg_idx, size=max_fg, replace=False)
        n_bg = min(cfg.rpn_batch - len(fg_idx), len(bg_idx))
        if len(bg_idx) > n_bg:
            bg_idx = sampler.choice(bg_idx, size=n_bg, replace=False)
        sampled = np.concatenate([fg_idx, bg_idx])
        sampled_t = torch.from_numpy(sampled)
        sampled_labels = torch.from_numpy((labels[sampled] == 1).astype(np.float32))
        l_obj = rpn_objectness_loss(obj_logits[sampled_t], sampled_labels)

        if len(fg_idx) > 0:
            targets = encode_deltas(anchors[fg_idx], gt_boxes[best_gt[fg_idx]])
            l_box = box_regression_loss(
                deltas[torch.from_numpy(fg_idx)], torch.from_numpy(targets).float()
            )
        else:
            l_box = obj_logits.new_zeros(())
        return l_obj, l_box

    def _sample_rois(self, proposals, gt_boxes, gt_classes, sampler):
        """Sample the RoI training batch from proposals + appended GT boxes."""
        cfg = self.config
        cand = [b.as_array() for b in proposals.boxes] + [b for b in gt_boxes]
        cand = np.stack(cand) if cand else gt_boxes.copy()
        ious = iou_matrix(cand, gt_boxes)
        best_gt = ious.argmax(axis=1)
        best_iou = ious.max(axis=1)
        fg_mask = best_iou >= cfg.roi_fg_iou
        bg_mask = best_iou < cfg.roi_bg_iou

        fg_idx = np.nonzero(fg_mask)[0]
        bg_idx = np.nonzero(bg_mask)[0]
        max_fg = int(cfg.roi_batch * cfg.roi_fg_fraction)
        if len(fg_idx) > max_fg:
            fg_idx = sampler.choice(fg_idx, size=max_fg, replace=False)
        n_bg = min(cfg.roi_batch - len(fg_idx), len(bg_idx))
        if len(bg_idx) > n_bg:
            bg_idx = sampler.choice(bg_idx, size=n_bg, replace=False)
        keep = np.concatenate([fg_idx, bg_idx])

        boxes = cand[keep]
        labels = np.full(len(keep), self.num_classes, dtype=np.int64)
        labels[: len(fg_idx)] = gt_classes[best_gt[fg_idx]]
        targets = np.zeros((len(keep), 4))
        if len(fg_idx) > 0:
            targets[: len(fg_idx)] = encode_deltas(cand[fg_idx], gt_boxes[best_gt[fg_idx]])
        return boxes, labels, targets

    # --- inference -----------------------------------------------------------

    def detect(self, image: np.ndarray | torch.Tensor) -> list[tuple[BoundingBox, int, float]]:
        """Run the full detector; returns (box, class_id, score) after per-class NMS."""
        cfg = self.config
        with torch.no_grad():
            features = self.backbone_forward(image)
            proposals = self.rpn_propose(features, top_k=cfg.eval_top_k)
            if len(proposals) == 0:
                return []
            self.fill_roi_outputs(features, proposals)
            prop_arr = np.stack([b.as_array() for b in proposals.boxes])
            refined = decode_deltas(prop_arr, proposals.box_deltas.numpy().astype(np.float64))
            refined[:, 0::2] = np.clip(refined[:, 0::2], 0.0, float(self.image_size))
            refined[:, 1::2] = np.clip(refined[:, 1::2], 0.0, float(self.image_size))
            posteriors = proposals.class_posteriors.numpy()

        detections: list[tuple[BoundingBox, int, float]] = []
        for c in range(self.num_classes):
            scores = posteriors[:, c]
            mask = (
                (scores >= cfg.eval_score_threshold)
                & (refined[:, 2] - refined[:, 0] >= 1.0)
                & (refined[:, 3] - refined[:, 1] >= 1.0)
            )
            if not mask.any():
                continue
            keep = nms(refined[mask], scores[mask], cfg.eval_nms_threshold)
            idx = np.nonzero(mask)[0][keep]
            for i in idx:
                detections.append((BoundingBox(*refined[i]), c, float(scores[i])))
        detections.sort(key=lambda d: -d[2])
        return detections
