"""A tiny fully-convolutional segmenter with hand-written backpropagation.

Architecture (fixed)::

    conv 3x3x3, 1 -> 8, ReLU
    conv 3x3x3, 8 -> 8, ReLU
    conv 1x1x1, 8 -> 1, sigmoid

Zero padding keeps the output on the input grid. Activations are stored
channel-last, ``(batch, x, y, z, channels)``, so every convolution is a single
im2col matrix product. Kernel taps that can only ever read padding (the
out-of-plane taps of a single-slice grid) are skipped; their gradients are
exactly zero.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from maxent_seg.losses import LossSpec, combined_loss
from maxent_seg.metrics import dice, ece, mean_foreground_entropy
from maxent_seg.volume import BinaryMask, ProbMap, Volume, threshold

log = logging.getLogger(__name__)

ARCHITECTURE = "conv3x3x3(1-8)-relu-conv3x3x3(8-8)-relu-conv1x1x1(8-1)-sigmoid"
CHECKPOINT_FORMAT = "maxent-seg-checkpoint"
CHECKPOINT_VERSION = 1
HIDDEN = 8

PARAM_SHAPES = {
    "conv1.w": (3, 3, 3, 1, HIDDEN),
    "conv1.b": (HIDDEN,),
    "conv2.w": (3, 3, 3, HIDDEN, HIDDEN),
    "conv2.b": (HIDDEN,),
    "conv3.w": (1, 1, 1, HIDDEN, 1),
    "conv3.b": (1,),
}


class DivergenceError(FloatingPointError):
    """Raised when the forward pass or the loss becomes non-finite."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass(eq=False)
class ModelParams:
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        missing = set(PARAM_SHAPES) - set(self.arrays)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, shape in PARAM_SHAPES.items():
            a = np.asarray(self.arrays[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            self.arrays[name] = a

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in PARAM_SHAPES)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


def init_params(seed: int = 0, init_scale: float = 1.0) -> ModelParams:
    """Fan-in scaled Gaussian weights (He scaling at ``init_scale=1``), zero biases."""
    if init_scale < 0:
        raise ValueError("init_scale must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arrays[name] = rng.standard_normal(shape) * (init_scale * math.sqrt(2.0 / fan_in))
    return ModelParams(arrays)


def _active_taps(spatial, k):
    if k == 1:
        return [(0, 0, 0)]
    per_axis = [[a for a in range(3) if n > 1 or a == 1] for n in spatial]
    return [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]


def _conv_forward(x, w, b):
    """Same-padded convolution; returns output and the im2col cache."""
    B, X, Y, Z, C = x.shape
    k = w.shape[0]
    O = w.shape[-1]
    if k == 1:
        cols = x.reshape(-1, C)
        out = cols @ w.reshape(C, O) + b
        return out.reshape(B, X, Y, Z, O), (cols, [(0, 0, 0)], x.shape)
    taps = _active_taps((X, Y, Z), k)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, a : a + X, b_ : b_ + Y, c : c + Z, :] for a, b_, c in taps], axis=-2)
    cols = cols.reshape(-1, len(taps) * C)
    wk = np.stack([w[t] for t in taps]).reshape(len(taps) * C, O)
    out = cols @ wk + b
    return out.reshape(B, X, Y, Z, O), (cols, taps, x.shape)


def _conv_backward(dout, w, cache, need_dx=True):
    cols, taps, xshape = cache
    B, X, Y, Z, C = xshape
    O = w.shape[-1]
    d2 = dout.reshape(-1, O)
    dwk = (cols.T @ d2).reshape(len(taps), C, O)
    dw = np.zeros_like(w)
    for i, t in enumerate(taps):
        dw[t] = dwk[i]
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    wk = np.stack([w[t] for t in taps]).reshape(len(taps) * C, O)
    dcols = (d2 @ wk.T).reshape(B, X, Y, Z, len(taps), C)
    if w.shape[0] == 1:
        return dcols[..., 0, :], dw, db
    dxp = np.zeros((B, X + 2, Y + 2, Z + 2, C))
    for i, (a, b_, c) in enumerate(taps):
        dxp[:, a : a + X, b_ : b_ + Y, c : c + Z, :] += dcols[..., i, :]
    return dxp[:, 1:-1, 1:-1, 1:-1, :], dw, db


def _forward_batch(params: ModelParams, x: np.ndarray):
    """x: (B, X, Y, Z) intensities. Returns probabilities and backprop cache."""
    h = x[..., None]
    z1, c1 = _conv_forward(h, params["conv1.w"], params["conv1.b"])
    a1 = np.maximum(z1, 0.0)
    z2, c2 = _conv_forward(a1, params["conv2.w"], params["conv2.b"])
    a2 = np.maximum(z2, 0.0)
    z3, c3 = _conv_forward(a2, params["conv3.w"], params["conv3.b"])
    y = expit(z3[..., 0])
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(z3)):
        raise DivergenceError("non-finite activations in forward pass")
    return y, (z1, c1, z2, c2, c3)


def _backward_batch(params: ModelParams, y: np.ndarray, dy: np.ndarray, cache) -> dict[str, np.ndarray]:
    z1, c1, z2, c2, c3 = cache
    dz3 = (dy * y * (1.0 - y))[..., None]
    da2, dw3, db3 = _conv_backward(dz3, params["conv3.w"], c3)
    dz2 = da2 * (z2 > 0)
    da1, dw2, db2 = _conv_backward(dz2, params["conv2.w"], c2)
    dz1 = da1 * (z1 > 0)
    _, dw1, db1 = _conv_backward(dz1, params["conv1.w"], c1, need_dx=False)
    return {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2, "conv3.w": dw3, "conv3.b": db3}


def forward(params: ModelParams, x: Volume) -> ProbMap:
    y, _ = _forward_batch(params, x.data[None])
    return ProbMap(y[0], x.spacing)


def predict(params: ModelParams, xs: list[Volume], batch_size: int = 16) -> list[ProbMap]:
    out = []
    for i in range(0, len(xs), batch_size):
        chunk = xs[i : i + batch_size]
        if len({v.dims for v in chunk}) == 1:
            y, _ = _forward_batch(params, np.stack([v.data for v in chunk]))
            out.extend(ProbMap(y[j], v.spacing) for j, v in enumerate(chunk))
        else:
            out.extend(forward(params, v) for v in chunk)
    return out


def _batch_loss_grad(params, xs, gts, spec, wrongs=None):
    """Mean of per-sample combined losses and its parameter gradient."""
    groups = {}
    for i, v in enumerate(xs):
        groups.setdefault(v.dims, []).append(i)
    total = 0.0
    grads = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    n = len(xs)
    for idx in groups.values():
        y, cache = _forward_batch(params, np.stack([xs[i].data for i in idx]))
        dy = np.empty_like(y)
        for j, i in enumerate(idx):
            pm = ProbMap(y[j], xs[i].spacing)
            ev = combined_loss(pm, gts[i], spec, None if wrongs is None else wrongs[i])
            total += ev.value
            dy[j] = ev.grad.data
        g = _backward_batch(params, y, dy / n, cache)
        for k in grads:
            grads[k] += g[k]
    value = total / n
    if not math.isfinite(value):
        raise DivergenceError("non-finite loss")
    return value, grads


def loss_grad_params(params: ModelParams, x: Volume, gt: BinaryMask, spec: LossSpec, wrong: BinaryMask | None = None):
    """Loss value and gradient for every weight and bias.

    ``wrong`` freezes the erroneous-voxel mask instead of recomputing it.
    """
    if x.dims != gt.dims:
        raise ValueError(f"dimension mismatch: {x.dims} vs {gt.dims}")
    return _batch_loss_grad(params, [x], [gt], spec, None if wrong is None else [wrong])


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float | None
    val_mean_fg_entropy: float | None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_dice,val_mean_fg_entropy"]
        for r in self.records:
            cells = [str(r.epoch), repr(r.train_loss), _fmt(r.val_dice), _fmt(r.val_mean_fg_entropy)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _fmt(x):
    return "" if x is None else repr(float(x))


def evaluate_split(params: ModelParams, data: list[tuple[Volume, BinaryMask]]) -> dict:
    """Mean Dice, pooled positive-probability ECE and mean foreground entropy."""
    probs = predict(params, [x for x, _ in data])
    dices = [dice(gt, threshold(p)) for p, (_, gt) in zip(probs, data)]
    ents = [e for e in (mean_foreground_entropy(p) for p in probs) if e is not None]
    table = ece(np.concatenate([p.flat() for p in probs]), np.concatenate([gt.flat() for _, gt in data]))
    return {
        "dice": math.fsum(dices) / len(dices),
        "ece": table.ece,
        "mean_fg_entropy": math.fsum(ents) / len(ents) if ents else None,
    }


def train(dataset, val, cfg: TrainConfig, params: ModelParams | None = None):
    """Full-image minibatch training with Adam.

    Deterministic for a given ``cfg.seed``: the same seed drives the weight
    initialization and, through a separate substream, the epoch shuffles.
    Returns ``(params, history)``; a non-finite loss raises
    :class:`DivergenceError` carrying the partial history.
    """
    if not dataset:
        raise ValueError("training set is empty")
    params = init_params(cfg.seed, cfg.init_scale) if params is None else params.copy()
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    history = TrainHistory()
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                value, grads = _batch_loss_grad(
                    params, [dataset[i][0] for i in idx], [dataset[i][1] for i in idx], cfg.loss
                )
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}: {exc}", history) from exc
            losses.append(value)
            opt.step(params.arrays, grads)
            bad = [k for k, a in params.arrays.items() if not np.all(np.isfinite(a))]
            if bad:
                raise DivergenceError(f"non-finite parameters after epoch {epoch} step: {bad}", history)
        stats = evaluate_split(params, val) if val else {"dice": None, "mean_fg_entropy": None}
        rec = EpochRecord(epoch, math.fsum(losses) / len(losses), stats["dice"], stats["mean_fg_entropy"])
        history.records.append(rec)
        log.debug("epoch %d loss %.5f val dice %s", epoch, rec.train_loss, rec.val_dice)
    return params, history


@dataclass
class GridSearchResult:
    best_lam: float
    rows: list[dict]
    models: dict[float, tuple[ModelParams, TrainHistory]]


def lambda_grid_search(train_set, val_set, cfg: TrainConfig, grid, dice_tolerance: float = 0.0) -> GridSearchResult:
    """Train one model per weight in ``grid`` and pick the best.

    Models whose validation Dice is within ``dice_tolerance`` of the best are
    considered tied; ties go to the lower validation ECE, then to the earlier
    grid entry.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")
    if not val_set:
        raise ValueError("grid search needs a validation set")
    rows = []
    models = {}
    for lam in grid:
        spec = LossSpec(**{**cfg.loss.to_dict(), "lam": float(lam)})
        run_cfg = TrainConfig(**{**cfg.__dict__, "loss": spec})
        params, history = train(train_set, val_set, run_cfg)
        stats = evaluate_split(params, val_set)
        rows.append({"lam": float(lam), **stats})
        models.setdefault(float(lam), (params, history))
    top = max(r["dice"] for r in rows)
    tied = [r for r in rows if r["dice"] >= top - dice_tolerance]
    best = min(tied, key=lambda r: r["ece"])
    return GridSearchResult(best["lam"], rows, models)


def _encode(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def save_checkpoint(params: ModelParams, cfg: TrainConfig | None = None, extra: dict | None = None) -> bytes:
    """Serialize parameters as JSON with base64 little-endian float64 arrays."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": ARCHITECTURE,
        "train_config": None if cfg is None else cfg.to_dict(),
        "params": {k: _encode(params[k]) for k in PARAM_SHAPES},
    }
    if extra:
        doc["extra"] = extra
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")


def load_checkpoint(blob: bytes) -> tuple[ModelParams, TrainConfig | None]:
    doc = json.loads(blob.decode("utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if doc.get("architecture") != ARCHITECTURE:
        raise ValueError(f"checkpoint architecture {doc.get('architecture')!r} does not match")
    arrays = {}
    for k, enc in doc["params"].items():
        raw = base64.b64decode(enc["data"])
        arrays[k] = np.frombuffer(raw, dtype=enc["dtype"]).reshape(enc["shape"]).astype(np.float64)
    cfg = doc.get("train_config")
    return ModelParams(arrays), (None if cfg is None else TrainConfig.from_dict(cfg))
