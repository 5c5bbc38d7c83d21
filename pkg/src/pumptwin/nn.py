"""Convolutional classifiers for 1D time windows and 2D spectrogram images.

Tensors and exact reverse-mode gradients come from torch (CPU, single
precision for training). Architectures are described by plain
:class:`NetworkSpec` records so they can be shape-checked statically,
embedded in checkpoints and rebuilt bit-identically from a seed.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeError, TrainingError, ValidationError
from .signal import RngStream

LAYER_KINDS = ("conv1d", "conv2d", "maxpool1d", "maxpool2d", "relu", "gap", "linear",
               "residual-block")
_NNCK_MAGIC = b"NNCK"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0      # output channels (conv, residual) or features (linear)
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        needs_kernel = self.kind in ("conv1d", "conv2d", "maxpool1d", "maxpool2d")
        if needs_kernel and self.kernel < 1:
            raise ValidationError(f"{self.kind} needs a positive kernel")
        if self.stride < 1 or self.padding < 0:
            raise ValidationError(f"{self.kind}: stride must be >= 1 and padding >= 0")
        if self.kind in ("conv1d", "conv2d", "linear", "residual-block") and self.channels < 1:
            raise ValidationError(f"{self.kind} needs a positive channel count")

    @property
    def dims(self) -> int:
        return 2 if self.kind.endswith("2d") else 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple            # (C, L) or (C, H, W)
    layers: tuple
    n_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.infer_shapes()

    @property
    def dims(self) -> int:
        return len(self.input_shape) - 1

    def infer_shapes(self) -> list[tuple]:
        """Output shape after every layer; raises ShapeError naming the culprit."""
        shape = self.input_shape
        out = []
        d = self.dims
        if d not in (1, 2):
            raise ShapeError(f"{self.name}: input must be (C, L) or (C, H, W)")
        for i, ly in enumerate(self.layers):
            where = f"{self.name} layer {i} ({ly.kind})"
            if ly.kind in ("conv1d", "conv2d", "maxpool1d", "maxpool2d", "residual-block"):
                if len(shape) != d + 1:
                    raise ShapeError(f"{where}: expects a feature map, got {shape}")
                if ly.kind != "residual-block" and ly.dims != d:
                    raise ShapeError(f"{where}: {ly.dims}D layer on {d}D input")
                k = 3 if ly.kind == "residual-block" else ly.kernel
                p = 1 if ly.kind == "residual-block" else ly.padding
                if ly.kind.startswith("maxpool") and p > k // 2:
                    raise ShapeError(f"{where}: pooling padding exceeds half the kernel")
                spatial = []
                for n in shape[1:]:
                    m = (n + 2 * p - k) // ly.stride + 1
                    if m < 1:
                        raise ShapeError(f"{where}: spatial size {n} too small for kernel {k}")
                    spatial.append(m)
                ch = shape[0] if ly.kind.startswith("maxpool") else ly.channels
                shape = (ch, *spatial)
            elif ly.kind == "relu":
                pass
            elif ly.kind == "gap":
                if len(shape) != d + 1:
                    raise ShapeError(f"{where}: expects a feature map, got {shape}")
                shape = (shape[0],)
            elif ly.kind == "linear":
                if len(shape) != 1:
                    raise ShapeError(f"{where}: linear layer needs a flat input, got {shape}")
                shape = (ly.channels,)
            out.append(shape)
        if shape != (self.n_classes,):
            raise ShapeError(f"{self.name}: final output {shape} is not ({self.n_classes},)")
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "layers": [asdict(ly) for ly in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["name"], tuple(d["input_shape"]),
                   tuple(LayerSpec(**ly) for ly in d["layers"]), int(d.get("n_classes", 4)))


# -- architecture catalogue ------------------------------------------------------

def _first_padding(kernel: int) -> int:
    return 0 if kernel >= 15 else kernel // 2


def cnn1d(kernel: int, stride: int, input_shape=(2, 3072), n_classes: int = 4) -> NetworkSpec:
    layers = (
        LayerSpec("conv1d", 64, kernel, stride, _first_padding(kernel)),
        LayerSpec("relu"),
        LayerSpec("maxpool1d", kernel=3, stride=2, padding=1),
        LayerSpec("conv1d", 64, 3, 1, 1),
        LayerSpec("relu"),
        LayerSpec("maxpool1d", kernel=3, stride=1, padding=1),
        LayerSpec("gap"),
        LayerSpec("linear", n_classes),
    )
    return NetworkSpec(f"CNN1D({kernel}@{stride})", input_shape, layers, n_classes)


def cnn2d(kernel: int, stride: int, input_shape=(2, 256, 256), n_classes: int = 4) -> NetworkSpec:
    layers = (
        LayerSpec("conv2d", 64, kernel, stride, _first_padding(kernel)),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", kernel=2, stride=2),
        LayerSpec("conv2d", 64, 3, 1, 1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", kernel=2, stride=2),
        LayerSpec("gap"),
        LayerSpec("linear", n_classes),
    )
    return NetworkSpec(f"CNN2D({kernel}x{kernel}@{stride})", input_shape, layers, n_classes)


_RESNET_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}


def resnet(depth: int, kernel: int, stride: int, input_shape, n_classes: int = 4) -> NetworkSpec:
    if depth not in _RESNET_BLOCKS:
        raise ValidationError(f"ResNet depth must be 18 or 34, got {depth}")
    d = len(input_shape) - 1
    conv, pool = ("conv1d", "maxpool1d") if d == 1 else ("conv2d", "maxpool2d")
    layers = [LayerSpec(conv, 64, kernel, stride, _first_padding(kernel)),
              LayerSpec("relu"),
              LayerSpec(pool, kernel=3, stride=2, padding=1)]
    for stage, (n_blocks, ch) in enumerate(zip(_RESNET_BLOCKS[depth], (64, 128, 256, 512))):
        for b in range(n_blocks):
            layers.append(LayerSpec("residual-block", ch, stride=2 if (b == 0 and stage > 0) else 1))
    layers += [LayerSpec("gap"), LayerSpec("linear", n_classes)]
    tag = f"{kernel}@{stride}" if d == 1 else f"{kernel}x{kernel}@{stride}"
    return NetworkSpec(f"ResNet{depth}({tag})", input_shape, tuple(layers), n_classes)


ARCHITECTURES_1D = ("CNN1D(341@100)", "CNN1D(150@50)", "CNN1D(3@1)",
                    "ResNet18(341@100)", "ResNet34(341@100)")
ARCHITECTURES_2D = ("CNN2D(3x3@1)", "CNN2D(7x7@2)", "CNN2D(30x30@3)",
                    "ResNet18(3x3@1)", "ResNet34(3x3@1)")


def architecture(name: str, input_shape=None, n_classes: int = 4) -> NetworkSpec:
    """Look up one of the named architectures, e.g. ``"CNN1D(341@100)"``."""
    key = name.replace("×", "x").replace(" ", "")
    head, _, rest = key.partition("(")
    kern, _, stride = rest.rstrip(")").partition("@")
    try:
        k = int(kern.split("x")[0])
        s = int(stride)
    except ValueError:
        raise ValidationError(f"cannot parse architecture name {name!r}") from None
    two_d = "x" in kern or head == "CNN2D"
    if input_shape is None:
        input_shape = (2, 256, 256) if two_d else (2, 3072)
    if head == "CNN1D":
        return cnn1d(k, s, input_shape, n_classes)
    if head == "CNN2D":
        return cnn2d(k, s, input_shape, n_classes)
    if head in ("ResNet18", "ResNet34"):
        return resnet(int(head[6:]), k, s, input_shape, n_classes)
    raise ValidationError(f"unknown architecture {name!r}")


# -- torch modules ----------------------------------------------------------------

class ResidualBlock(nn.Module):
    """Basic block: conv3-relu-conv3 plus identity or 1x1 projection, then relu."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, dims: int):
        super().__init__()
        Conv = nn.Conv1d if dims == 1 else nn.Conv2d
        self.conv1 = Conv(in_ch, out_ch, 3, stride, 1)
        self.conv2 = Conv(out_ch, out_ch, 3, 1, 1)
        self.proj = Conv(in_ch, out_ch, 1, stride, 0) if (stride != 1 or in_ch != out_ch) else None
        self.act1 = nn.ReLU()
        self.act2 = nn.ReLU()

    def forward(self, x):
        y = self.conv2(self.act1(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return self.act2(y + skip)


class GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.flatten(2).mean(dim=2)


class Network(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        shapes = [spec.input_shape] + spec.infer_shapes()
        mods = []
        for ly, sin in zip(spec.layers, shapes[:-1]):
            k = ly.kind
            if k == "conv1d":
                mods.append(nn.Conv1d(sin[0], ly.channels, ly.kernel, ly.stride, ly.padding))
            elif k == "conv2d":
                mods.append(nn.Conv2d(sin[0], ly.channels, ly.kernel, ly.stride, ly.padding))
            elif k == "maxpool1d":
                mods.append(nn.MaxPool1d(ly.kernel, ly.stride, ly.padding))
            elif k == "maxpool2d":
                mods.append(nn.MaxPool2d(ly.kernel, ly.stride, ly.padding))
            elif k == "relu":
                mods.append(nn.ReLU())
            elif k == "gap":
                mods.append(GlobalAvgPool())
            elif k == "linear":
                mods.append(nn.Linear(sin[0], ly.channels))
            elif k == "residual-block":
                mods.append(ResidualBlock(sin[0], ly.channels, ly.stride, spec.dims))
        self.layers = nn.ModuleList(mods)
        kinds = [ly.kind for ly in spec.layers]
        self.gap_index = kinds.index("gap") if "gap" in kinds else None

    def forward(self, x, keep_activations: bool = False):
        acts = []
        for m in self.layers:
            x = m(x)
            if keep_activations:
                acts.append(x)
        return (x, acts) if keep_activations else x

    def feature_maps(self, x):
        """Maps entering the global pooling layer, and the logits computed from them."""
        if self.gap_index is None:
            raise ShapeError(f"{self.spec.name} has no global pooling layer")
        for m in self.layers[:self.gap_index]:
            x = m(x)
        a = x
        for m in self.layers[self.gap_index:]:
            x = m(x)
        return a, x


def init_parameters(model: nn.Module, seed: int) -> None:
    """Kaiming-uniform (fan-in, ReLU gain) weights and zero biases from a seeded stream."""
    rng = RngStream(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                u = rng.uniform(p.numel()).reshape(tuple(p.shape))
                p.copy_(torch.from_numpy((2.0 * u - 1.0) * bound))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 60

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size >= 1 and self.epochs >= 0):
            raise ValidationError("learning rate, batch size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetworkState:
    spec: NetworkSpec
    model: Network
    hp: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)   # (epoch, loss, train_acc)

    def parameters(self) -> list[np.ndarray]:
        return [p.detach().cpu().numpy().copy() for p in self.model.parameters()]

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()]).astype(np.float32)


def configure_torch(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    if torch.get_num_threads() != threads:
        torch.set_num_threads(threads)


def new_state(spec: NetworkSpec, seed: int = 0, hp: TrainConfig | None = None) -> NetworkState:
    model = Network(spec)
    init_parameters(model, seed)
    return NetworkState(spec, model, hp or TrainConfig(), seed)


def _as_batch(state: NetworkState, x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x), dtype=next(state.model.parameters()).dtype)
    if tuple(t.shape[1:]) != state.spec.input_shape:
        if tuple(t.shape) == state.spec.input_shape:
            t = t.unsqueeze(0)
        else:
            raise ShapeError(f"{state.spec.name} layer 0 ({state.spec.layers[0].kind}): "
                             f"input {tuple(t.shape)} does not match {state.spec.input_shape}")
    return t


def forward(state: NetworkState, x) -> tuple[np.ndarray, list]:
    """Logits [batch, n_classes] and the per-layer activations."""
    xb = _as_batch(state, x)
    with torch.no_grad():
        logits, acts = state.model(xb, keep_activations=True)
    return logits.numpy(), acts


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, n_classes: int, n_batch: int) -> torch.Tensor:
    y = np.asarray(labels)
    if y.shape != (n_batch,):
        raise ValidationError(f"{y.size} labels for a batch of {n_batch}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    return torch.as_tensor(y, dtype=torch.long)


def loss_and_backward(state: NetworkState, batch, labels) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over the batch and the gradient of every parameter."""
    xb = _as_batch(state, batch)
    y = _check_labels(labels, state.spec.n_classes, xb.shape[0])
    state.model.zero_grad(set_to_none=False)
    loss = F.cross_entropy(state.model(xb), y)
    loss.backward()
    return float(loss.detach()), [p.grad.detach().numpy().copy() for p in state.model.parameters()]


@dataclass
class GradientCheck:
    max_rel_error: float
    probes: int
    skipped: int
    errors: np.ndarray


class _KinkRecorder:
    """Records which side of every ReLU / max-pool switch a forward pass lands on."""

    def __init__(self, model: nn.Module):
        self.parts = []
        self.handles = []
        for m in model.modules():
            if isinstance(m, nn.ReLU):
                self.handles.append(m.register_forward_hook(self._relu))
            elif isinstance(m, (nn.MaxPool1d, nn.MaxPool2d)):
                self.handles.append(m.register_forward_hook(self._pool))

    def _relu(self, m, inp, out):
        self.parts.append((inp[0] > 0).flatten())

    def _pool(self, m, inp, out):
        fn = F.max_pool1d if isinstance(m, nn.MaxPool1d) else F.max_pool2d
        _, idx = fn(inp[0], m.kernel_size, m.stride, m.padding, return_indices=True)
        self.parts.append(idx.flatten())

    def pattern(self, run):
        self.parts = []
        value = run()
        return value, [p.clone() for p in self.parts]

    def close(self):
        for h in self.handles:
            h.remove()


def _same_pattern(a, b) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(model: nn.Module, x, labels, n_probe: int = 100, h: float = 1e-3,
                   seed: int = 0, floor: float = 1e-8, max_tries: int | None = None) -> GradientCheck:
    """Compare backprop gradients to central differences on a float64 copy.

    A central difference only approximates the derivative when the loss is
    smooth on [theta - h, theta + h]. Probes whose perturbation flips a ReLU
    sign or a max-pool winner anywhere in the network are therefore skipped
    and counted, and probing continues until ``n_probe`` valid probes exist.
    Relative error is |g - g_fd| / max(|g|, |g_fd|, floor).
    """
    shadow = copy.deepcopy(model).double()
    xb = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    params = list(shadow.parameters())
    shadow.zero_grad()
    F.cross_entropy(shadow(xb), y).backward()
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = RngStream(seed).permutation(int(sizes.sum()))
    max_tries = max_tries or 20 * n_probe
    rec = _KinkRecorder(shadow)
    loss = lambda: float(F.cross_entropy(shadow(xb), y))
    errs, skipped = [], 0
    try:
        with torch.no_grad():
            _, base = rec.pattern(loss)
            for flat in order[:max_tries]:
                if len(errs) >= n_probe:
                    break
                i = int(np.searchsorted(offsets, flat, side="right") - 1)
                view = params[i].view(-1)
                j = int(flat - offsets[i])
                orig = float(view[j])
                view[j] = orig + h
                lp, pat_p = rec.pattern(loss)
                view[j] = orig - h
                lm, pat_m = rec.pattern(loss)
                view[j] = orig
                if not (_same_pattern(base, pat_p) and _same_pattern(base, pat_m)):
                    skipped += 1
                    continue
                g_fd = (lp - lm) / (2.0 * h)
                g = float(grads[i].view(-1)[j])
                errs.append(abs(g - g_fd) / max(abs(g), abs(g_fd), floor))
    finally:
        rec.close()
    errs = np.array(errs)
    return GradientCheck(float(errs.max()) if errs.size else 0.0, int(errs.size), skipped, errs)


# -- training and evaluation ----------------------------------------------------------

def train(spec: NetworkSpec, X, y, hp: TrainConfig | None = None, seed: int = 0,
          on_epoch: Callable | None = None) -> NetworkState:
    """Adam on mean cross-entropy; shuffle and init streams both derive from ``seed``."""
    hp = hp or TrainConfig()
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValidationError("training set is empty")
    if tuple(X.shape[1:]) != spec.input_shape:
        raise ShapeError(f"{spec.name} layer 0 ({spec.layers[0].kind}): training inputs "
                         f"{tuple(X.shape[1:])} do not match {spec.input_shape}")
    _check_labels(y, spec.n_classes, X.shape[0])
    configure_torch()
    root = RngStream(seed)
    state = new_state(spec, root.spawn(1).seed, hp)
    state.seed = seed
    shuffle = root.spawn(2)
    opt = torch.optim.Adam(state.model.parameters(), lr=hp.lr, betas=(hp.beta1, hp.beta2),
                           eps=hp.eps)
    Xt = torch.from_numpy(X)
    yt = torch.from_numpy(y)
    n = X.shape[0]
    state.model.train()
    for epoch in range(1, hp.epochs + 1):
        order = torch.from_numpy(shuffle.permutation(n))
        loss_sum, correct = 0.0, 0
        for a in range(0, n, hp.batch_size):
            idx = order[a:a + hp.batch_size]
            xb, yb = Xt[idx], yt[idx]
            opt.zero_grad(set_to_none=False)
            logits = state.model(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"{spec.name}: non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        state.epoch = epoch
        state.history.append((epoch, loss_sum / n, correct / n))
        if on_epoch is not None:
            on_epoch(state)
    state.model.eval()
    return state


def predict(state: NetworkState, X, batch_size: int = 128) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    out = []
    with torch.no_grad():
        for a in range(0, X.shape[0], batch_size):
            out.append(state.model(_as_batch(state, X[a:a + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, state.spec.n_classes), np.float32)


def training_accuracy(state: NetworkState, X, y) -> float:
    return float(np.mean(predict(state, X).argmax(1) == np.asarray(y)))


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray          # rows = true labels, cols = predicted (before collapse)
    true_labels: tuple
    predicted_labels: tuple
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "true_labels": list(self.true_labels),
                "predicted_labels": list(self.predicted_labels)}


def score_predictions(pred_idx, true_labels: Sequence[str], class_names: Sequence[str],
                      label_map: dict | None = None) -> Evaluation:
    """Accuracy after mapping each predicted class name through ``label_map``."""
    class_names = tuple(class_names)
    mapping = {c: c for c in class_names}
    mapping.update(label_map or {})
    pred_idx = np.asarray(pred_idx, dtype=int)
    true_labels = list(true_labels)
    rows = tuple(dict.fromkeys(sorted(set(true_labels), key=_label_order)))
    conf = np.zeros((len(rows), len(class_names)), dtype=np.int64)
    correct = 0
    for p, t in zip(pred_idx, true_labels):
        conf[rows.index(t), p] += 1
        correct += mapping[class_names[p]] == t
    acc = correct / len(true_labels) if true_labels else 0.0
    return Evaluation(float(acc), conf, rows, class_names, pred_idx)


def _label_order(lbl: str):
    order = {"H": 0, "S": 1, "C1": 2, "C2": 3, "C": 4}
    return (order.get(lbl, 99), lbl)


def evaluate(state: NetworkState, X, true_labels: Sequence[str], class_names: Sequence[str],
             label_map: dict | None = None) -> Evaluation:
    return score_predictions(predict(state, X).argmax(1), true_labels, class_names, label_map)


# -- persistence ---------------------------------------------------------------------

def save_checkpoint(state: NetworkState, path: str | Path) -> Path:
    """``NNCK`` | u32 header length | JSON header | f32 LE parameters in declaration order."""
    params = state.parameters()
    header = {"spec": state.spec.to_dict(), "hp": state.hp.to_dict(), "seed": state.seed,
              "epoch": state.epoch, "shapes": [list(p.shape) for p in params],
              "history": [list(h) for h in state.history]}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_NNCK_MAGIC + struct.pack("<I", len(blob)) + blob)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> NetworkState:
    raw = Path(path).read_bytes()
    if raw[:4] != _NNCK_MAGIC:
        raise ValidationError(f"{path}: not an NNCK checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    spec = NetworkSpec.from_dict(header["spec"])
    model = Network(spec)
    off = 8 + hlen
    with torch.no_grad():
        for p, shape in zip(model.parameters(), header["shapes"]):
            if list(p.shape) != shape:
                raise ShapeError(f"{path}: parameter shape {shape} does not match {list(p.shape)}")
            n = p.numel()
            vals = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            p.copy_(torch.from_numpy(vals.reshape(shape).astype(np.float32)))
            off += 4 * n
    if off != len(raw):
        raise ValidationError(f"{path}: {len(raw) - off} trailing bytes")
    model.eval()
    return NetworkState(spec, model, TrainConfig(**header["hp"]), header["seed"], header["epoch"],
                        [tuple(h) for h in header.get("history", [])])


def write_training_log(state: NetworkState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc"])
        for e, loss, acc in state.history:
            w.writerow([e, f"{loss:.9g}", f"{acc:.6f}"])
    return path
