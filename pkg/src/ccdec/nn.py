"""Neural-network decoder for fixed codes.

The first layer is an additive lookup table (m x 2^b x d weights); its output
goes through ``block_count`` blocks of batch normalization, a fully connected
layer, ReLU and a second fully connected layer. Forward, backward, the
optimizers and the plateau scheduler are implemented directly on numpy arrays.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .core import CodeArray, DecoderLUT, as_matrix
from .decoders import aq_decode, aq_fit

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
HISTORY_FIELDS = ("epoch", "train_mse", "val_mse", "lr")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``history`` holds the epochs completed so far."""

    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 5e-4
    lr_decay: float = 0.5
    plateau_patience: int = 10
    min_lr: float = 1e-6
    weight_decay: float = 0.0
    triplet_weight: float = 0.0
    margin: float | None = None
    kpos: int = 10
    seed: int = 0
    block_count: int = 1
    hidden: int | None = None
    residual: bool = False
    dropout: float = 0.0
    optimizer: str = "adam"
    aq_lambda: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr must be > 0 and lr_decay in (0, 1]")
        if self.triplet_weight < 0:
            raise ValueError("triplet_weight must be >= 0")
        if self.margin is not None and self.margin <= 0:
            raise ValueError("margin must be > 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {sorted(OPTIMIZERS)}")


@dataclass
class NNDecoderParams:
    """Trainable arrays and batch-norm running statistics of the decoder.

    ``arrays`` holds ``lut`` and, per block ``j``, ``blocks.j.{gamma,beta,W1,b1,W2,b2}``;
    ``buffers`` holds ``blocks.j.{running_mean,running_var}``.
    """

    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    block_count: int
    hidden: int
    residual: bool = False
    dropout: float = 0.0

    @property
    def lut(self) -> np.ndarray:
        return self.arrays["lut"]

    @property
    def m(self) -> int:
        return self.lut.shape[0]

    @property
    def ksub(self) -> int:
        return self.lut.shape[1]

    @property
    def bits(self) -> int:
        return int(self.ksub).bit_length() - 1

    @property
    def dim(self) -> int:
        return self.lut.shape[2]

    @property
    def dtype(self):
        return self.lut.dtype

    def copy(self) -> "NNDecoderParams":
        return replace(
            self,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "NNDecoderParams":
        return replace(
            self,
            arrays={k: v.astype(dtype) for k, v in self.arrays.items()},
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(
    lut: DecoderLUT | np.ndarray,
    block_count: int = 1,
    hidden: int | None = None,
    residual: bool = False,
    dropout: float = 0.0,
    lut_output: np.ndarray | None = None,
    seed: int = 0,
    dtype="float32",
) -> NNDecoderParams:
    """Build decoder parameters around an additive LUT.

    When ``hidden >= 2 * d`` every block starts as the identity map on the
    LUT output: batch norm standardizes with the statistics of
    ``lut_output``, the first layer copies ``[z, -z]`` into the hidden units
    and the second layer undoes the standardization, since
    ``relu(z) - relu(-z) = z``. Extra hidden units get random input weights
    and zero output weights, so the network initially decodes exactly like
    the LUT alone (in eval mode). A residual block starts as the zero map
    instead. With ``hidden < 2 * d`` the layers get He initialization.
    """
    tables = lut.tables if isinstance(lut, DecoderLUT) else np.asarray(lut)
    m, ksub, d = tables.shape
    h = 2 * d if hidden is None else int(hidden)
    rng = np.random.default_rng(seed)
    arrays = {"lut": tables.astype(np.float64)}
    buffers = {}
    if lut_output is None:
        mu, var = np.zeros(d), np.ones(d)
    else:
        y = np.asarray(lut_output, dtype=np.float64)
        mu, var = y.mean(0), y.var(0)
    sd = np.sqrt(var + BN_EPS)
    for j in range(block_count):
        p = f"blocks.{j}."
        W1 = rng.standard_normal((d, h)) * math.sqrt(2.0 / d)
        W2 = np.zeros((h, d))
        b2 = np.zeros(d)
        if h >= 2 * d and not residual:
            W1[:, :d] = np.eye(d)
            W1[:, d : 2 * d] = -np.eye(d)
            W2[:d] = np.diag(sd)
            W2[d : 2 * d] = -np.diag(sd)
            b2 = mu.copy()
        elif not residual:
            W2 = rng.standard_normal((h, d)) * math.sqrt(2.0 / h)
            b2 = mu.copy()
        arrays[p + "gamma"] = np.ones(d)
        arrays[p + "beta"] = np.zeros(d)
        arrays[p + "W1"] = W1
        arrays[p + "b1"] = np.zeros(h)
        arrays[p + "W2"] = W2
        arrays[p + "b2"] = b2
        buffers[p + "running_mean"] = mu.copy()
        buffers[p + "running_var"] = var.copy()
    params = NNDecoderParams(arrays, buffers, block_count, h, residual, dropout)
    return params.astype(np.dtype(dtype))


def lut_sum(tables: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sum of selected LUT rows, accumulated in float64 in subquantizer order."""
    t = np.asarray(tables, dtype=np.float64)
    acc = np.zeros((idx.shape[0], t.shape[2]), np.float64)
    for i in range(t.shape[0]):
        acc += t[i][idx[:, i]]
    return acc


def _indices(codes, params: NNDecoderParams) -> np.ndarray:
    if isinstance(codes, CodeArray):
        if codes.m != params.m or codes.ksub != params.ksub:
            raise ValueError(
                f"codes are {codes.m}x{codes.bits}, decoder expects {params.m}x{params.bits}"
            )
        return codes.unpack()
    idx = np.asarray(codes)
    if idx.ndim != 2 or idx.shape[1] != params.m:
        raise ValueError(f"index table must be (n, {params.m}), got {idx.shape}")
    return idx


def _forward(params: NNDecoderParams, idx: np.ndarray, train: bool, rng=None, update_stats=False):
    """Forward pass on an index table; returns the output and a cache for backward."""
    dt = params.dtype
    y = lut_sum(params.lut, idx).astype(dt)
    cache = {"idx": idx, "blocks": []}
    n = y.shape[0]
    for j in range(params.block_count):
        p = f"blocks.{j}."
        A = params.arrays
        if train:
            mu = y.mean(0)
            var = y.var(0)
            if update_stats:
                rm, rv = params.buffers[p + "running_mean"], params.buffers[p + "running_var"]
                rm *= 1 - BN_MOMENTUM
                rm += BN_MOMENTUM * mu
                rv *= 1 - BN_MOMENTUM
                rv += BN_MOMENTUM * var * n / (n - 1)
        else:
            mu = params.buffers[p + "running_mean"]
            var = params.buffers[p + "running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (y - mu) * inv
        z = A[p + "gamma"] * xhat + A[p + "beta"]
        hpre = z @ A[p + "W1"] + A[p + "b1"]
        a = np.maximum(hpre, 0)
        mask = None
        if train and params.dropout > 0:
            keep = 1.0 - params.dropout
            mask = (rng.random(a.shape) < keep).astype(dt) / dt.type(keep)
            a = a * mask
        out = a @ A[p + "W2"] + A[p + "b2"]
        if params.residual:
            out = out + y
        cache["blocks"].append((xhat, inv, z, hpre, a, mask))
        y = out.astype(dt, copy=False)
    return y, cache


def _backward(params: NNDecoderParams, cache, dy: np.ndarray, train: bool) -> dict[str, np.ndarray]:
    grads = {}
    A = params.arrays
    for j in reversed(range(params.block_count)):
        p = f"blocks.{j}."
        xhat, inv, z, hpre, a, mask = cache["blocks"][j]
        grads[p + "W2"] = a.T @ dy
        grads[p + "b2"] = dy.sum(0)
        da = dy @ A[p + "W2"].T
        if mask is not None:
            da = da * mask
        dh = da * (hpre > 0)
        grads[p + "W1"] = z.T @ dh
        grads[p + "b1"] = dh.sum(0)
        dz = dh @ A[p + "W1"].T
        grads[p + "gamma"] = (dz * xhat).sum(0)
        grads[p + "beta"] = dz.sum(0)
        dxhat = dz * A[p + "gamma"]
        if train:
            n = dxhat.shape[0]
            dyin = (inv / n) * (n * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
        else:
            dyin = dxhat * inv
        if params.residual:
            dyin = dyin + dy
        dy = dyin
    idx = cache["idx"]
    n, m = idx.shape
    cols = (idx + np.arange(m) * params.ksub).ravel()
    design = sp.csr_matrix(
        (np.ones(n * m, dy.dtype), cols, np.arange(0, n * m + 1, m)),
        shape=(n, m * params.ksub),
    )
    grads["lut"] = np.asarray(design.T @ dy).reshape(params.lut.shape)
    return grads


def nn_forward(params: NNDecoderParams, codes, mode: str = "eval", chunk: int = 65536, rng=None) -> np.ndarray:
    """Decode codes. ``mode="train"`` uses batch statistics and updates running stats."""
    idx = _indices(codes, params)
    if mode == "train":
        if idx.shape[0] < 2 and params.block_count > 0:
            raise ValueError("train-mode forward needs a batch of at least 2 codes")
        return _forward(params, idx, True, rng or np.random.default_rng(), update_stats=True)[0]
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = np.empty((idx.shape[0], params.dim), params.dtype)
    for s in range(0, idx.shape[0], chunk):
        out[s : s + chunk] = _forward(params, idx[s : s + chunk], False)[0]
    return out


def reconstruction_loss(X, Xhat) -> float:
    """Mean over the batch of the squared Euclidean reconstruction error."""
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {Xhat.shape}")
    return float(((X - Xhat) ** 2).sum(-1).mean())


def triplet_loss(x, x_pos_recon, x_neg_recon, margin: float) -> float:
    """Mean over the batch of ``max(0, |x - q(x+)|^2 - |x - q(x-)|^2 + margin)``."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dp = ((x - np.atleast_2d(x_pos_recon)) ** 2).sum(-1)
    dn = ((x - np.atleast_2d(x_neg_recon)) ** 2).sum(-1)
    return float(np.maximum(0.0, dp - dn + margin).mean())


def loss_and_grads(
    params: NNDecoderParams,
    idx: np.ndarray,
    X: np.ndarray,
    triplet_weight: float = 0.0,
    pos_idx: np.ndarray | None = None,
    neg_idx: np.ndarray | None = None,
    margin: float = 1.0,
    rng=None,
    update_stats: bool = False,
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Total loss, reconstruction MSE and gradients for one train-mode batch.

    ``idx`` holds the anchors' codes and ``X`` their vectors. With a positive
    ``triplet_weight``, ``pos_idx``/``neg_idx`` are the codes of each
    anchor's positive and negative; all three groups go through one forward
    pass so they share batch-norm statistics.
    """
    B = idx.shape[0]
    use_triplet = triplet_weight > 0
    rows = np.concatenate([idx, pos_idx, neg_idx]) if use_triplet else idx
    Y, cache = _forward(params, rows, True, rng, update_stats)
    Xd = X.astype(params.dtype, copy=False)
    diff = Y[:B] - Xd
    recon = float((diff.astype(np.float64) ** 2).sum() / B)
    dY = np.zeros_like(Y)
    dY[:B] = 2.0 * diff / B
    total = recon
    if use_triplet:
        rp = Xd - Y[B : 2 * B]
        rn = Xd - Y[2 * B :]
        gap = (rp * rp).sum(1) - (rn * rn).sum(1) + margin
        active = (gap > 0).astype(params.dtype)
        total += triplet_weight * float(np.maximum(gap, 0).mean())
        w = (triplet_weight / B) * active[:, None]
        dY[B : 2 * B] = -2.0 * rp * w
        dY[2 * B :] = 2.0 * rn * w
    return total, recon, _backward(params, cache, dY, True)


def mine_triplets(X, kpos: int = 10, seed: int = 0, ranks: np.ndarray | None = None) -> np.ndarray:
    """One ``(anchor, positive, negative)`` triple per training vector.

    The positive is drawn uniformly among the anchor's ``kpos`` exact nearest
    neighbours (self excluded); the negative is the neighbour of rank
    ``kpos + 1``. Ranks use exact squared distances, ties to the lower id.
    """
    X = as_matrix(X)
    n = X.shape[0]
    if n <= kpos + 1:
        raise ValueError(f"need more than {kpos + 1} vectors to mine triplets, got {n}")
    if ranks is None:
        ranks = knn_ranks(X, kpos + 1)
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, kpos, size=n)
    return np.stack([np.arange(n), ranks[np.arange(n), pick], ranks[:, kpos]], axis=1)


def knn_ranks(X: np.ndarray, k: int, chunk: int = 2048) -> np.ndarray:
    """The ``k`` nearest neighbours of every row among the other rows, nearest first."""
    n = X.shape[0]
    X64 = X.astype(np.float64)
    norms = (X64 * X64).sum(1)
    out = np.empty((n, k), np.int64)
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        d = norms[s:e, None] - 2.0 * X64[s:e] @ X64.T + norms[None, :]
        d[np.arange(e - s), np.arange(s, e)] = np.inf
        part = np.argpartition(d, k, axis=1)[:, : k + 1]
        for r in range(e - s):
            thr = d[r, part[r]].max()
            cand = np.flatnonzero(d[r] <= thr)
            order = cand[np.argsort(d[r, cand], kind="stable")]
            out[s + r] = order[:k]
    return out


def default_margin(X: np.ndarray, ranks: np.ndarray, kpos: int) -> float:
    """0.1 times the mean squared distance to the kpos-th neighbour."""
    X64 = X.astype(np.float64)
    return 0.1 * float(((X64 - X64[ranks[:, kpos - 1]]) ** 2).sum(1).mean())


class Adam:
    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            self.m[k] *= self.b1
            self.m[k] += (1 - self.b1) * g
            self.v[k] *= self.b2
            self.v[k] += (1 - self.b2) * g * g
            p -= (self.lr / c1) * self.m[k] / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params, lr, weight_decay=0.0, momentum=0.9):
        self.lr, self.wd, self.mom = lr, weight_decay, momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, p in params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            self.buf[k] *= self.mom
            self.buf[k] += g
            p -= self.lr * self.buf[k]


class RMSprop:
    def __init__(self, params, lr, weight_decay=0.0, alpha=0.99, eps=1e-8):
        self.lr, self.wd, self.alpha, self.eps = lr, weight_decay, alpha, eps
        self.sq = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, p in params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            self.sq[k] *= self.alpha
            self.sq[k] += (1 - self.alpha) * g * g
            p -= self.lr * g / (np.sqrt(self.sq[k]) + self.eps)


class Adadelta:
    def __init__(self, params, lr, weight_decay=0.0, rho=0.9, eps=1e-6):
        self.lr, self.wd, self.rho, self.eps = lr, weight_decay, rho, eps
        self.sq = {k: np.zeros_like(v) for k, v in params.items()}
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        for k, p in params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            self.sq[k] *= self.rho
            self.sq[k] += (1 - self.rho) * g * g
            delta = np.sqrt(self.acc[k] + self.eps) / np.sqrt(self.sq[k] + self.eps) * g
            self.acc[k] *= self.rho
            self.acc[k] += (1 - self.rho) * delta * delta
            p -= self.lr * delta


OPTIMIZERS = {"adam": Adam, "sgd": SGD, "rmsprop": RMSprop, "adadelta": Adadelta}


class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    a relative improvement of 1e-4 in the monitored loss."""

    def __init__(self, optimizer, factor=0.5, patience=10, min_lr=1e-6, threshold=1e-4):
        self.opt, self.factor, self.patience = optimizer, factor, patience
        self.min_lr, self.threshold = min_lr, threshold
        self.best = math.inf
        self.bad = 0

    def step(self, loss: float) -> None:
        if loss < self.best * (1 - self.threshold):
            self.best = loss
            self.bad = 0
            return
        self.bad += 1
        if self.bad > self.patience:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.bad = 0


@dataclass
class TrainResult:
    params: NNDecoderParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    margin: float | None = None


def _eval_mse(params, idx, X, chunk=65536) -> float:
    total = 0.0
    for s in range(0, idx.shape[0], chunk):
        y = _forward(params, idx[s : s + chunk], False)[0].astype(np.float64)
        total += float(((y - X[s : s + chunk]) ** 2).sum())
    return total / idx.shape[0]


def train_decoder(
    codes_train: CodeArray,
    X_train,
    codes_val: CodeArray,
    X_val,
    cfg: TrainConfig | None = None,
    lut: DecoderLUT | None = None,
) -> TrainResult:
    """Train the decoder on reconstruction loss (plus the optional triplet term).

    The LUT layer starts from the ridge-fitted additive decoder on the
    training codes (``lut`` overrides it). The learning rate is reduced on
    validation-loss plateaus. The returned parameters are those of the epoch
    with the lowest validation MSE, epoch 0 being the initialization. History
    rows hold eval-mode MSE on the full training and validation sets after
    each epoch.

    Raises:
        ValueError: on an empty validation set or misaligned inputs.
        TrainingDiverged: when the training loss becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    X_train = as_matrix(X_train, "X_train")
    X_val = as_matrix(X_val, "X_val")
    if X_val.shape[0] == 0 or codes_val.n == 0:
        raise ValueError("validation set is empty")
    if codes_train.n != X_train.shape[0] or codes_val.n != X_val.shape[0]:
        raise ValueError("codes and vectors are not row-aligned")
    if X_train.shape[0] < 2:
        raise ValueError("need at least 2 training vectors")
    rng = np.random.default_rng(cfg.seed)
    if lut is None:
        lut = aq_fit(codes_train, X_train, cfg.aq_lambda)
    itype = np.uint8 if codes_train.bits <= 8 else np.int32
    idx_tr = codes_train.unpack().astype(itype)
    idx_va = codes_val.unpack().astype(itype)
    y0 = aq_decode(lut, codes_train) if cfg.block_count else None
    params = init_params(
        lut, cfg.block_count, cfg.hidden, cfg.residual, cfg.dropout, y0, cfg.seed, cfg.dtype
    )
    del y0

    triplets = None
    margin = cfg.margin
    if cfg.triplet_weight > 0:
        ranks = knn_ranks(X_train, cfg.kpos + 1)
        triplets = mine_triplets(X_train, cfg.kpos, cfg.seed, ranks)
        if margin is None:
            margin = default_margin(X_train, ranks, cfg.kpos)
        del ranks

    opt = OPTIMIZERS[cfg.optimizer](params.arrays, cfg.lr, weight_decay=cfg.weight_decay)
    sched = ReduceOnPlateau(opt, cfg.lr_decay, cfg.plateau_patience, cfg.min_lr)
    Xtr64 = X_train.astype(np.float64)
    Xva64 = X_val.astype(np.float64)
    val = _eval_mse(params, idx_va, Xva64)
    history = [{"epoch": 0, "train_mse": _eval_mse(params, idx_tr, Xtr64), "val_mse": val, "lr": opt.lr}]
    best, best_val, best_epoch = params.copy(), val, 0

    n = X_train.shape[0]
    bs = min(cfg.batch_size, n)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n - bs + 1, bs):
            rows = perm[s : s + bs]
            pos = neg = None
            if triplets is not None:
                pos = idx_tr[triplets[rows, 1]]
                neg = idx_tr[triplets[rows, 2]]
            total, _, grads = loss_and_grads(
                params, idx_tr[rows], X_train[rows], cfg.triplet_weight, pos, neg,
                margin or 1.0, rng, update_stats=True,
            )
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
            opt.step(params.arrays, grads)
        train = _eval_mse(params, idx_tr, Xtr64)
        val = _eval_mse(params, idx_va, Xva64)
        if not (math.isfinite(val) and math.isfinite(train)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
        history.append({"epoch": epoch, "train_mse": train, "val_mse": val, "lr": opt.lr})
        log.debug("epoch %d train %.6g val %.6g lr %.2g", epoch, train, val, opt.lr)
        if val < best_val:
            best, best_val, best_epoch = params.copy(), val, epoch
        sched.step(val)
    return TrainResult(best, history, best_epoch, margin)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in HISTORY_FIELDS})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
