"""Grad-CAM localisation maps and a region-overlap score for them."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import UnsupportedArchitectureError, ValidationError
from .nn import NetworkState, _as_batch
from .signal import resample_array
from .tfr import write_spec


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray      # upsampled to the input's spatial size, >= 0
    raw: np.ndarray         # map at feature resolution
    class_index: int
    weights: np.ndarray     # alpha_k: spatially averaged gradients per feature map

    def normalized(self) -> np.ndarray:
        m = self.values.max()
        return self.values / m if m > 0 else self.values.copy()


def _feature_maps_and_logits(state: NetworkState, x):
    kinds = [ly.kind for ly in state.spec.layers]
    if not any(k.startswith("conv") or k == "residual-block" for k in kinds):
        raise UnsupportedArchitectureError(f"{state.spec.name} has no convolutional layer")
    xb = _as_batch(state, x)
    if xb.shape[0] != 1:
        raise ValidationError("gradcam explains one input at a time")
    with torch.no_grad():
        a, _ = state.model.feature_maps(xb)
    # the pooling head is re-run in float64 so the map is not limited by float32 cancellation
    a = a.double().requires_grad_(True)
    x = a
    for m in state.model.layers[state.model.gap_index:]:
        x = copy.deepcopy(m).double()(x)
    return a, x


def gradcam(state: NetworkState, x, class_index: int) -> AttributionMap:
    """Grad-CAM over the feature maps A_k that enter global pooling.

    alpha_k = mean over positions of d y_c / d A_k with y_c the class logit;
    the raw map is ReLU(sum_k alpha_k A_k), upsampled linearly (1D) or
    bilinearly (2D) to the input size.
    """
    n_classes = state.spec.n_classes
    if not 0 <= class_index < n_classes:
        raise ValidationError(f"class_index {class_index} outside [0, {n_classes})")
    a, logits = _feature_maps_and_logits(state, x)
    grad, = torch.autograd.grad(logits[0, class_index], a, allow_unused=True)
    A = a.detach()[0]
    if grad is None:
        grad = torch.zeros_like(a)
    G = grad.detach()[0]
    alpha = G.flatten(1).mean(dim=1)
    shape = (-1,) + (1,) * (A.dim() - 1)
    raw = torch.relu((alpha.view(shape) * A).sum(dim=0)).numpy()
    up = raw
    for axis, n in enumerate(state.spec.input_shape[1:]):
        up = resample_array(up, n, axis=axis) if up.shape[axis] != n else up
    return AttributionMap(np.maximum(up, 0.0), raw, int(class_index), alpha.numpy())


def cam_map(state: NetworkState, x, class_index: int) -> np.ndarray:
    """Classic CAM, ReLU(sum_k w_{c,k} A_k), using the final linear layer's weights."""
    a, _ = _feature_maps_and_logits(state, x)
    head = state.model.layers[-1]
    w = head.weight.detach()[class_index].double()
    A = a.detach()[0].double()
    shape = (-1,) + (1,) * (A.dim() - 1)
    return torch.relu((w.view(shape) * A).sum(dim=0)).numpy()


def _union_mask(n: int, regions) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    for r in regions:
        if len(r) != 2:
            raise ValidationError(f"region {r!r} is not a (start, stop) pair")
        a, b = int(r[0]), int(r[1])
        if a > b or a < 0 or b > n:
            raise ValidationError(f"region ({a}, {b}) is malformed or outside [0, {n}]")
        mask[a:b] = True
    return mask


def attention_alignment_score(m: AttributionMap | np.ndarray, regions) -> float:
    """Fraction of the map's mass inside the union of half-open index intervals.

    1D maps take ``(start, stop)`` pairs. 2D maps accept intervals over the
    last (time) axis, which is how spectrogram images are aligned to dips.
    """
    values = m.values if isinstance(m, AttributionMap) else np.asarray(m, dtype=np.float64)
    regions = list(regions)
    mask = _union_mask(values.shape[-1], regions)
    total = values.sum()
    if not regions or total <= 0:
        return 0.0
    inside = values[..., mask].sum()
    return float(inside / total)


def write_attribution_csv(m: AttributionMap, path: str | Path) -> Path:
    if m.values.ndim != 1:
        raise ValidationError("CSV export is for 1D maps; use write_attribution_spec")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "value", "normalized"])
        for i, (v, nv) in enumerate(zip(m.values, m.normalized())):
            w.writerow([i, f"{v:.9g}", f"{nv:.9g}"])
    return path


def write_attribution_spec(m: AttributionMap, path: str | Path) -> Path:
    return write_spec(m.values, path)
