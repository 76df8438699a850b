"""Feedforward regressor with MC dropout and a heteroscedastic output head.

Layers are stored as ``(in, out)`` weight matrices so a batch ``X`` of shape
``(n, D)`` flows through ``X @ W + b``.  Hidden layers use a leaky ReLU; the
output head is linear.  With ``heteroscedastic=True`` the head also emits
log-variances ``alpha`` (one per joint by default, or one per coordinate).

Dropout sites are numbered by the activation they act on: site 0 is the
network input and site ``l`` is the output of hidden layer ``l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DROPOUT_MODES = ("none", "A", "B", "C")
LOSS_KINDS = ("mse", "heteroscedastic")
ALPHA_LIMIT = 10.0
VAR_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelParams:
    weights: list  # list of (in, out) arrays
    biases: list
    K: int
    dropout_rate: float = 0.1
    dropout_mode: str = "A"
    heteroscedastic: bool = True
    alpha_per: str = "joint"
    slope: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.dropout_mode not in DROPOUT_MODES:
            raise ContractError(f"dropout_mode must be one of {DROPOUT_MODES}, got {self.dropout_mode!r}")
        if self.alpha_per not in ("joint", "coordinate"):
            raise ContractError(f"alpha_per must be 'joint' or 'coordinate', got {self.alpha_per!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty lists of equal length")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} does not match weight {W.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {W.shape[0]} != output dim {self.weights[i - 1].shape[1]} of layer {i - 1}"
                )
        if self.weights[-1].shape[1] != self.head_width:
            raise ShapeError(
                f"layer {len(self.weights) - 1}: head width {self.weights[-1].shape[1]} != expected {self.head_width}"
            )

    @property
    def out_dim(self) -> int:
        return 3 * self.K

    @property
    def alpha_dim(self) -> int:
        if not self.heteroscedastic:
            return 0
        return self.K if self.alpha_per == "joint" else 3 * self.K

    @property
    def head_width(self) -> int:
        return self.out_dim + self.alpha_dim

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def site_width(self, site: int) -> int:
        return self.in_dim if site == 0 else self.weights[site - 1].shape[1]

    def copy(self) -> "ModelParams":
        return replace(self, weights=[W.copy() for W in self.weights], biases=[b.copy() for b in self.biases])

    def arrays(self) -> list:
        """Parameter arrays interleaved as W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def dropout_sites(params: ModelParams) -> tuple:
    """Activation sites that receive dropout under the params' mode.

    A: after every hidden layer; B: the last two hidden layers (the feature
    extractor / dense boundary); C: the input and every hidden layer.
    """
    H = params.n_hidden
    mode = params.dropout_mode
    if mode == "none" or params.dropout_rate == 0.0 or H == 0 and mode != "C":
        return ()
    if mode == "A":
        return tuple(range(1, H + 1))
    if mode == "B":
        return tuple(range(max(1, H - 1), H + 1))
    return tuple(range(0, H + 1))


def init_params(
    D: int,
    K: int,
    hidden=(64, 64, 64),
    *,
    heteroscedastic: bool = True,
    dropout_mode: str = "A",
    dropout_rate: float = 0.1,
    alpha_per: str = "joint",
    seed: int = 0,
) -> ModelParams:
    """Fan-in scaled uniform initialization; alpha outputs start at zero."""
    rng = np.random.default_rng(seed)
    alpha_dim = 0 if not heteroscedastic else (K if alpha_per == "joint" else 3 * K)
    dims = [D, *hidden, 3 * K + alpha_dim]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        limit = math.sqrt((3.0 if last else 6.0) / fan_in)
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if last and alpha_dim:
            W[:, 3 * K :] *= 0.1
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return ModelParams(
        weights, biases, K,
        dropout_rate=dropout_rate, dropout_mode=dropout_mode,
        heteroscedastic=heteroscedastic, alpha_per=alpha_per,
    )


def sample_masks(params: ModelParams, n: int, rng: np.random.Generator) -> dict:
    """Inverted-dropout masks (values 0 or 1/(1-p)) for each active site."""
    keep = 1.0 - params.dropout_rate
    masks = {}
    for site in dropout_sites(params):
        u = rng.random((n, params.site_width(site)))
        masks[site] = (u < keep) / keep
    return masks


def _as_batch(params: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != params.in_dim:
        raise ShapeError(f"layer 0: input has {X.shape[1]} features, expected {params.in_dim}")
    return X


def _forward(params: ModelParams, X: np.ndarray, masks: dict | None):
    """Return head output plus the cache needed for backprop."""
    masks = masks or {}
    a = X * masks[0] if 0 in masks else X
    inputs, pre = [a], []
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        if a.shape[1] != W.shape[0]:
            raise ShapeError(f"layer {l}: got {a.shape[1]} inputs, expected {W.shape[0]}")
        z = a @ W + b
        if l == L - 1:
            return z, (inputs, pre, masks)
        pre.append(z)
        a = np.where(z > 0, z, params.slope * z)
        if l + 1 in masks:
            a = a * masks[l + 1]
        inputs.append(a)


def _split_head(params: ModelParams, out: np.ndarray):
    C = params.out_dim
    yhat = out[:, :C]
    if not params.heteroscedastic:
        return yhat, None, None
    raw = out[:, C:]
    return yhat, np.clip(raw, -ALPHA_LIMIT, ALPHA_LIMIT), raw


def broadcast_alpha(params: ModelParams, alpha: np.ndarray) -> np.ndarray:
    """Expand per-joint log-variances to per-coordinate ones."""
    if params.alpha_per == "joint":
        return np.repeat(alpha, 3, axis=1)
    return alpha


def forward(params: ModelParams, x, stochastic: bool = False, rng: np.random.Generator | None = None):
    """Predict means and (if heteroscedastic) per-coordinate log-variances.

    Accepts a single feature vector or a batch.  With ``stochastic=True`` fresh
    dropout masks are drawn from ``rng``.
    """
    X = _as_batch(params, x)
    masks = None
    if stochastic:
        if rng is None:
            raise ContractError("stochastic forward pass needs an rng")
        masks = sample_masks(params, X.shape[0], rng)
    out, _ = _forward(params, X, masks)
    yhat, alpha, _ = _split_head(params, out)
    if alpha is not None:
        alpha = broadcast_alpha(params, alpha)
    if np.ndim(x) == 1:
        return yhat[0], None if alpha is None else alpha[0]
    return yhat, alpha


# -- objectives ---------------------------------------------------------------


def mse_value(Y, Yhat, K: int) -> float:
    """Mean over samples of the mean over joints of the squared 3-D residual norm."""
    Y, Yhat = np.atleast_2d(Y), np.atleast_2d(Yhat)
    n = Y.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    return float(np.sum((Yhat - Y) ** 2) / (n * K))


def heteroscedastic_value(Y, Yhat, alpha, K: int) -> float:
    """Attenuated loss: mean over samples and joints of 0.5*exp(-a)*|r|^2 + 0.5*a.

    ``alpha`` has shape (n, K) for per-joint log-variances or (n, 3K) for
    per-coordinate ones; it is clamped to [-10, 10] here.
    """
    Y, Yhat, alpha = np.atleast_2d(Y), np.atleast_2d(Yhat), np.atleast_2d(alpha)
    n = Y.shape[0]
    if n == 0:
        raise ContractError("empty batch")
    alpha = np.clip(alpha, -ALPHA_LIMIT, ALPHA_LIMIT)
    r2 = (Yhat - Y) ** 2
    if alpha.shape[1] == K:
        r2 = r2.reshape(n, K, 3).sum(axis=2)
    return float(np.sum(0.5 * np.exp(-alpha) * r2 + 0.5 * alpha) / (n * K))


def _check_batch(params: ModelParams, X, Y):
    X = _as_batch(params, X)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0:
        raise ContractError("empty batch")
    if Y.shape != (X.shape[0], params.out_dim):
        raise ShapeError(f"targets have shape {Y.shape}, expected {(X.shape[0], params.out_dim)}")
    return X, Y


def loss_mse(params: ModelParams, X, Y, rng: np.random.Generator | None = None) -> float:
    """Squared-error objective; deterministic unless an rng is given for dropout."""
    X, Y = _check_batch(params, X, Y)
    masks = sample_masks(params, X.shape[0], rng) if rng is not None else None
    out, _ = _forward(params, X, masks)
    return mse_value(Y, out[:, : params.out_dim], params.K)


def loss_heteroscedastic(params: ModelParams, X, Y, rng: np.random.Generator | None = None) -> float:
    if not params.heteroscedastic:
        raise ContractError("heteroscedastic loss needs a model with a log-variance head")
    X, Y = _check_batch(params, X, Y)
    masks = sample_masks(params, X.shape[0], rng) if rng is not None else None
    out, _ = _forward(params, X, masks)
    yhat, alpha, _ = _split_head(params, out)
    return heteroscedastic_value(Y, yhat, alpha, params.K)


def loss_and_grad(params: ModelParams, X, Y, loss_kind: str, masks: dict | None = None):
    """Loss and exact gradients (list of ``(dW, db)``) under fixed dropout masks."""
    if loss_kind not in LOSS_KINDS:
        raise ContractError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if loss_kind == "heteroscedastic" and not params.heteroscedastic:
        raise ContractError("heteroscedastic loss needs a model with a log-variance head")
    X, Y = _check_batch(params, X, Y)
    n, K, C = X.shape[0], params.K, params.out_dim
    out, (inputs, pre, masks) = _forward(params, X, masks)
    yhat, alpha, raw = _split_head(params, out)
    r = yhat - Y
    dout = np.zeros_like(out)
    norm = 1.0 / (n * K)
    if loss_kind == "mse":
        loss = float(np.sum(r**2) * norm)
        dout[:, :C] = 2.0 * r * norm
    else:
        inv = np.exp(-alpha)
        if params.alpha_per == "joint":
            r2 = (r**2).reshape(n, K, 3).sum(axis=2)
            dout[:, :C] = np.repeat(inv, 3, axis=1) * r * norm
        else:
            r2 = r**2
            dout[:, :C] = inv * r * norm
        loss = float(np.sum(0.5 * inv * r2 + 0.5 * alpha) * norm)
        inside = (raw >= -ALPHA_LIMIT) & (raw <= ALPHA_LIMIT)
        dout[:, C:] = (0.5 - 0.5 * inv * r2) * norm * inside

    grads = [None] * len(params.weights)
    dz = dout
    for l in range(len(params.weights) - 1, -1, -1):
        grads[l] = (inputs[l].T @ dz, dz.sum(axis=0))
        if l == 0:
            break
        da = dz @ params.weights[l].T
        if l in masks:
            da = da * masks[l]
        dz = da * np.where(pre[l - 1] > 0, 1.0, params.slope)
    return loss, grads


def grad(params: ModelParams, X, Y, loss_kind: str, seed: int | None = None):
    """Gradients of the chosen loss with dropout masks drawn from ``seed``.

    ``seed=None`` means a deterministic pass (no masks).
    """
    X = _as_batch(params, X)
    masks = None if seed is None else sample_masks(params, X.shape[0], np.random.default_rng(seed))
    return loss_and_grad(params, X, Y, loss_kind, masks)[1]


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    loss_kind: str = "heteroscedastic"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if not self.learning_rate >= 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, arrays: list, grads: list) -> None:
        if not self.m:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(params: ModelParams, X, Y, cfg: TrainConfig) -> tuple[ModelParams, list]:
    """Minibatch Adam with dropout active; returns new params and per-epoch mean loss.

    Each epoch is split into ``ceil(n / batch_size)`` batches of near-equal size.

    Shuffling and dropout masks come from one stream seeded by ``cfg.seed``.
    """
    cfg.validate()
    X, Y = _check_batch(params, X, Y)
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    arrays = params.arrays()
    n = X.shape[0]
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        # near-equal batches of at most batch_size; avoids a tiny trailing batch
        for bi, idx in enumerate(np.array_split(order, -(-n // cfg.batch_size))):
            masks = sample_masks(params, idx.size, rng)
            loss, grads = loss_and_grad(params, X[idx], Y[idx], cfg.loss_kind, masks)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step(arrays, [g for pair in grads for g in pair])
            total += loss * idx.size
        history.append(total / n)
    return params, history


# -- Monte-Carlo prediction ---------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    combined_var: np.ndarray
    M: int

    @property
    def epistemic_sd(self) -> np.ndarray:
        return np.sqrt(self.epistemic_var)


def epistemic_variance(passes) -> np.ndarray:
    """Population variance over the leading (pass) axis: mean of squares minus squared mean.

    Tiny negatives from cancellation are clamped to zero.
    """
    passes = np.asarray(passes, dtype=np.float64)
    return _population_variance(passes, passes.mean(axis=0))


def _population_variance(passes: np.ndarray, mean: np.ndarray) -> np.ndarray:
    var = np.mean(passes**2, axis=0) - mean**2
    bad = var < -VAR_CLAMP
    if np.any(bad):
        # cancellation beyond the clamp tolerance: fall back to the two-pass form
        var = np.where(bad, np.mean((passes - mean) ** 2, axis=0), var)
    return np.where(var < 0, 0.0, var)


def mc_predict(params: ModelParams, X, M: int = 40, seed: int = 0, indices=None, chunk: int = 256) -> Prediction:
    """Average ``M`` dropout passes per input.

    The masks for input ``i`` are drawn from a stream seeded by
    ``(seed, indices[i])``, so each row of the result depends only on that
    input and is unaffected by batching or ordering.
    """
    if M < 1:
        raise ContractError(f"M must be >= 1, got {M}")
    single = np.ndim(X) == 1
    X = _as_batch(params, X)
    n = X.shape[0]
    indices = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
    sites = dropout_sites(params)
    C = params.out_dim

    if not sites:
        out, _ = _forward(params, X, None)
        yhat, alpha, _ = _split_head(params, out)
        mean = yhat
        ep = np.zeros_like(mean)
        al = np.exp(broadcast_alpha(params, alpha)) if alpha is not None else np.zeros_like(mean)
        pred = Prediction(mean, ep, al, ep + al, M)
        return _squeeze(pred) if single else pred

    keep = 1.0 - params.dropout_rate
    widths = [params.site_width(s) for s in sites]
    total = sum(widths)
    means, eps_, als = [], [], []
    for start in range(0, n, chunk):
        Xc = X[start : start + chunk]
        m = Xc.shape[0]
        u = np.empty((M, m, total))
        for j, gidx in enumerate(indices[start : start + chunk]):
            u[:, j, :] = np.random.default_rng([seed, int(gidx)]).random((M, total))
        flat = (u < keep).reshape(M * m, total) / keep
        masks, off = {}, 0
        for s, w in zip(sites, widths):
            masks[s] = flat[:, off : off + w]
            off += w
        out, _ = _forward(params, np.tile(Xc, (M, 1)), masks)
        yhat, alpha, _ = _split_head(params, out)
        passes = yhat.reshape(M, m, C)
        mean = passes.mean(axis=0)
        means.append(mean)
        eps_.append(_population_variance(passes, mean))
        if alpha is None:
            als.append(np.zeros_like(mean))
        else:
            a = broadcast_alpha(params, alpha).reshape(M, m, C)
            als.append(np.exp(a).mean(axis=0))
    mean, ep, al = np.vstack(means), np.vstack(eps_), np.vstack(als)
    pred = Prediction(mean, ep, al, ep + al, M)
    return _squeeze(pred) if single else pred


def _squeeze(pred: Prediction) -> Prediction:
    return Prediction(pred.mean[0], pred.epistemic_var[0], pred.aleatoric_var[0], pred.combined_var[0], pred.M)


# -- checkpoints --------------------------------------------------------------

_MAGIC = "bayesal-model 1"


def save_params(params: ModelParams, path) -> None:
    """Text checkpoint: header, then per layer a dims line, row-major weights, biases."""
    lines = [
        _MAGIC,
        f"K={params.K},dropout_rate={params.dropout_rate!r},dropout_mode={params.dropout_mode},"
        f"heteroscedastic={int(params.heteroscedastic)},alpha_per={params.alpha_per},slope={params.slope!r}",
        f"layers={len(params.weights)}",
    ]
    for W, b in zip(params.weights, params.biases):
        lines.append(f"{W.shape[0]},{W.shape[1]}")
        lines.append(",".join(repr(float(v)) for v in W.ravel()))
        lines.append(",".join(repr(float(v)) for v in b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ContractError(f"{path}: not a model checkpoint")
    meta = dict(item.split("=", 1) for item in lines[1].split(","))
    n_layers = int(lines[2].split("=", 1)[1])
    weights, biases = [], []
    pos = 3
    for _ in range(n_layers):
        fan_in, fan_out = (int(v) for v in lines[pos].split(","))
        W = np.array([float(v) for v in lines[pos + 1].split(",")]).reshape(fan_in, fan_out)
        b = np.array([float(v) for v in lines[pos + 2].split(",")])
        weights.append(W)
        biases.append(b)
        pos += 3
    return ModelParams(
        weights, biases, int(meta["K"]),
        dropout_rate=float(meta["dropout_rate"]), dropout_mode=meta["dropout_mode"],
        heteroscedastic=bool(int(meta["heteroscedastic"])), alpha_per=meta["alpha_per"],
        slope=float(meta["slope"]),
    )
