"""Experiment configuration and drivers.

Every driver works on in-memory arrays (a :class:`Dataset`) and writes
fixed-header CSV files into an output directory. Timing columns are the only
non-deterministic output for a given seed.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import synthetic
from .core import CodeArray, as_matrix, mse
from .decoders import TOPLINE_MAX_BITS, aq_decode, aq_fit, binary_naive_decode, natural_decode, topline_fit
from .encoders import (
    ITQModel,
    PQModel,
    binary_encode,
    itq_train,
    opq_train,
    pq_encode,
    pq_train,
)
from .nn import TrainConfig, nn_forward, train_decoder
from .search import (
    SearchResult,
    adc_scan_decoded,
    adc_scan_pq,
    groundtruth,
    median_time,
    recall_at,
    rerank,
    sdc_scan_binary,
)
from .vecs import read_vecs

log = logging.getLogger(__name__)

RECALL_RS = (1, 10, 100)
SUMMARY_HEADER = ("config", "R", "recall", "recall_std", "scan_ms", "rerank_ms")
RUNS_HEADER = ("config", "seed", "R", "recall", "scan_ms")
MSE_HEADER = ("config", "seed", "train_mse", "val_mse", "base_mse")
PRELIM_HEADER = ("ntrain", "encoder", "decoder", "train_mse", "val_mse")
RERANK_HEADER = ("config", "L", "recall_1", "recall_10", "recall_100", "scan_ms", "rerank_ms")
SENS_HEADER = ("param", "value", "epoch", "train_mse", "val_mse", "lr")
REFERENCE_HEADER = ("decoder", "train_mse", "val_mse")
SCHEMAS = {
    "summary.csv": SUMMARY_HEADER,
    "runs.csv": RUNS_HEADER,
    "mse.csv": MSE_HEADER,
    "prelim.csv": PRELIM_HEADER,
    "rerank.csv": RERANK_HEADER,
    "sensitivity.csv": SENS_HEADER,
    "reference.csv": REFERENCE_HEADER,
}
TIMING_COLUMNS = {"scan_ms", "rerank_ms"}


class ConfigError(ValueError):
    pass


def _ints(s: str) -> list[int]:
    return [int(float(v)) for v in s.split(",") if v.strip()]


@dataclass
class ExperimentConfig:
    """Flat experiment settings.

    ``nn.<field>`` keys override :class:`~ccdec.nn.TrainConfig` fields and
    ``sweep.<field>`` keys give comma-separated value lists for the
    sensitivity driver. When ``train`` is empty the bundled synthetic
    generator provides the data.
    """

    train: str = ""
    base: str = ""
    query: str = ""
    groundtruth: str = ""
    ntrain: int = 500_000
    nval: int = 10_000
    nbase: int = 0
    nquery: int = 0
    encoder: str = "pq"
    m: int = 16
    bits: int = 4
    decoders: str = "natural,aq,nn"
    aq_lambda: float = -1.0
    seeds: str = "0,1,2,3,4"
    shortlist: str = "2,5,10,20,50,100,200,500,1000"
    timing_reps: int = 5
    prelim_bits: int = 16
    prelim_m: str = "2,4"
    prelim_ntrain: str = "10000,30000,100000,300000,1000000"
    prelim_kmeans: bool = True
    nn_steps: int = 0
    synthetic_dim: int = 64
    synthetic_seed: int = 0
    output: str = "results"
    nn: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.encoder not in ("pq", "opq", "itq"):
            raise ConfigError(f"encoder must be pq, opq or itq, got {self.encoder!r}")
        bad = set(self.decoder_list) - {"natural", "sdc", "aq", "topline", "nn"}
        if bad:
            raise ConfigError(f"unknown decoders {sorted(bad)}")
        if "sdc" in self.decoder_list and self.encoder != "itq":
            raise ConfigError("sdc decoding is only defined for binary (itq) codes")
        if self.encoder == "itq" and self.bits != 1:
            raise ConfigError("itq codes have bits=1")
        if "topline" in self.decoder_list and self.m * self.bits > TOPLINE_MAX_BITS:
            raise ConfigError(
                f"topline decoding of {self.m * self.bits}-bit codes exceeds the 2^{TOPLINE_MAX_BITS} table limit"
            )
        names = {f.name for f in fields(TrainConfig)}
        for group in (self.nn, self.sweep):
            unknown = set(group) - names
            if unknown:
                raise ConfigError(f"unknown training keys {sorted(unknown)}")
        if self.bits not in (1, 4, 8, 16) or self.m < 1:
            raise ConfigError(f"need m >= 1 and bits in 1, 4, 8, 16; got m={self.m} bits={self.bits}")
        self.train_config()
        for key, value in sweep_points(self.sweep):
            self.train_config(**{key: value})
        if not self.seed_list:
            raise ConfigError("need at least one seed")
        for m in _ints(self.prelim_m):
            if m < 1 or self.prelim_bits % m or self.prelim_bits // m not in (1, 4, 8, 16):
                raise ConfigError(f"{self.prelim_bits}-bit codes cannot be split into {m} subquantizers of 1, 4, 8 or 16 bits")

    @property
    def decoder_list(self) -> list[str]:
        return [d.strip() for d in self.decoders.split(",") if d.strip()]

    @property
    def seed_list(self) -> list[int]:
        return _ints(self.seeds)

    @property
    def shortlist_grid(self) -> list[int]:
        return _ints(self.shortlist)

    @property
    def label(self) -> str:
        return f"{self.encoder.upper()}{self.m}x{self.bits}"

    def train_config(self, seed: int | None = None, **extra) -> TrainConfig:
        kw = {k: _coerce(TrainConfig, k, v) for k, v in self.nn.items()}
        kw.update(extra)
        if seed is not None:
            kw["seed"] = seed
        return TrainConfig(**kw)

    @property
    def lam(self) -> float | None:
        return None if self.aq_lambda < 0 else self.aq_lambda


def _coerce(cls, key: str, value):
    """Parse a config string according to the field's annotation."""
    if not isinstance(value, str):
        return value
    hint = str(next(f for f in fields(cls) if f.name == key).type)
    v = value.strip()
    if "None" in hint and v.lower() in ("none", ""):
        return None
    try:
        if hint.startswith("bool"):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if hint.startswith("int"):
            f = float(v)
            if f != int(f):
                raise ValueError
            return int(f)
        if hint.startswith("float"):
            return float(v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {hint}") from None
    return v


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then command-line overrides."""
    merged = dict(file_values or {})
    merged.update(overrides or {})
    kw: dict = {"nn": {}, "sweep": {}}
    top = {f.name for f in fields(ExperimentConfig)} - {"nn", "sweep"}
    for key, value in merged.items():
        if key.startswith("nn."):
            kw["nn"][key[3:]] = value
        elif key.startswith("sweep."):
            kw["sweep"][key[6:]] = value
        elif key in top:
            kw[key] = _coerce(ExperimentConfig, key, value)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return ExperimentConfig(**kw)


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = {}
    if path:
        with open(path) as f:
            values = parse_config_text(f.read())
    return build_config(values, overrides)


@dataclass
class Dataset:
    train: np.ndarray
    base: np.ndarray
    query: np.ndarray
    gt: np.ndarray | None = None

    def ground_truth(self) -> np.ndarray:
        if self.gt is None:
            self.gt = groundtruth(self.base, self.query, 1)
        return self.gt[:, 0] if self.gt.ndim == 2 else self.gt


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if not cfg.train:
        nbase = cfg.nbase or 100_000
        nquery = cfg.nquery or 1_000
        s = synthetic.splits(cfg.ntrain + cfg.nval, nbase, nquery, cfg.synthetic_dim, cfg.synthetic_seed)
        return Dataset(s["train"], s["base"], s["query"])
    train = read_vecs(cfg.train, count=cfg.ntrain + cfg.nval)
    base = read_vecs(cfg.base, count=cfg.nbase or None) if cfg.base else np.empty((0, train.shape[1]), np.float32)
    query = read_vecs(cfg.query, count=cfg.nquery or None) if cfg.query else np.empty((0, train.shape[1]), np.float32)
    gt = None
    if cfg.groundtruth and not cfg.nbase:
        gt = read_vecs(cfg.groundtruth, "ivecs", count=cfg.nquery or None)
    return Dataset(train, base, query, gt)


def split_train_val(X: np.ndarray, nval: int) -> tuple[np.ndarray, np.ndarray]:
    """Last ``nval`` rows become the validation split (at most a fifth of the data)."""
    nval = min(nval, X.shape[0] // 5)
    if nval < 1:
        raise ConfigError("training set too small to hold out a validation split")
    return X[:-nval], X[-nval:]


# --- encoders -----------------------------------------------------------------


def train_encoder(kind: str, X, m: int, bits: int, seed: int = 0):
    if kind == "pq":
        return pq_train(X, m, bits, seed=seed)
    if kind == "opq":
        return opq_train(X, m, bits, seed=seed)
    if kind == "itq":
        return itq_train(X, m, seed=seed)
    raise ConfigError(f"unknown encoder {kind!r}")


def encode(model, X) -> CodeArray:
    return binary_encode(model, X) if isinstance(model, ITQModel) else pq_encode(model, X)


def natural(model, codes: CodeArray) -> np.ndarray:
    return binary_naive_decode(model, codes) if isinstance(model, ITQModel) else natural_decode(model, codes)


def _write_csv(path, header, rows, mode="w") -> None:
    new = mode == "w" or not os.path.exists(path)
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}" if math.isfinite(v) else repr(v)
    return v


def check_csv_schema(path) -> list[dict]:
    """Parse a driver CSV and check its header against the documented schema."""
    name = os.path.basename(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path} is empty")
    expected = SCHEMAS.get(name)
    if expected is not None and tuple(rows[0]) != expected:
        raise ValueError(f"{path}: header {rows[0]} != {list(expected)}")
    width = len(rows[0])
    for i, r in enumerate(rows[1:], 2):
        if len(r) != width:
            raise ValueError(f"{path}: line {i} has {len(r)} fields, expected {width}")
    return [dict(zip(rows[0], r)) for r in rows[1:]]


# --- recall experiment ----------------------------------------------------------


@dataclass
class DecoderRun:
    config: str
    seed: int
    recalls: dict
    scan_s: float
    train_mse: float = float("nan")
    val_mse: float = float("nan")
    base_mse: float = float("nan")


def _fit_nn(codes_tr, Xtr, codes_va, Xva, tcfg: TrainConfig):
    return train_decoder(codes_tr, Xtr, codes_va, Xva, tcfg).params


def evaluate_seed(cfg: ExperimentConfig, data: Dataset, seed: int) -> list[DecoderRun]:
    """Train the encoder with ``seed``, fit each requested decoder and search all queries."""
    Xtr, Xva = split_train_val(as_matrix(data.train)[: cfg.ntrain + cfg.nval], cfg.nval)
    gt = data.ground_truth()
    Rmax = min(max(RECALL_RS), data.base.shape[0])
    model = train_encoder(cfg.encoder, Xtr, cfg.m, cfg.bits, seed)
    ctr, cva, cb = encode(model, Xtr), encode(model, Xva), encode(model, data.base)
    runs = []

    def record(name, res: SearchResult, recon_tr=None, recon_va=None, recon_b=None):
        recalls = {R: recall_at(res, gt, R) for R in RECALL_RS if R <= Rmax}
        run = DecoderRun(f"{cfg.label}+{name}", seed, recalls, res.timing["scan"] / max(1, res.nq))
        if recon_tr is not None:
            run.train_mse, run.val_mse = mse(Xtr, recon_tr), mse(Xva, recon_va)
            run.base_mse = mse(data.base, recon_b)
        runs.append(run)
        log.info("%s seed %d recalls %s", run.config, seed, recalls)

    for name in cfg.decoder_list:
        if name == "natural":
            if isinstance(model, PQModel):
                res = adc_scan_pq(data.query, model, cb, Rmax)
            else:
                res = adc_scan_decoded(data.query, natural(model, cb), Rmax)
            record("natural", res, natural(model, ctr), natural(model, cva), natural(model, cb))
        elif name == "sdc":
            res = sdc_scan_binary(encode(model, data.query), cb, Rmax)
            record("sdc", res)
        elif name == "aq":
            lut = aq_fit(ctr, Xtr, cfg.lam)
            rb = aq_decode(lut, cb)
            record("aq", adc_scan_decoded(data.query, rb, Rmax), aq_decode(lut, ctr), aq_decode(lut, cva), rb)
        elif name == "topline":
            top = topline_fit(ctr, Xtr, lambda c: natural(model, c))
            rb = top.decode(cb)
            record("topline", adc_scan_decoded(data.query, rb, Rmax), top.decode(ctr), top.decode(cva), rb)
        elif name == "nn":
            params = _fit_nn(ctr, Xtr, cva, Xva, cfg.train_config(seed, aq_lambda=cfg.lam))
            rb = nn_forward(params, cb)
            record("nn", adc_scan_decoded(data.query, rb, Rmax), nn_forward(params, ctr), nn_forward(params, cva), rb)
    return runs


def run_recall_experiment(cfg: ExperimentConfig, data: Dataset | None = None) -> list[dict]:
    """Recall@{1,10,100} per decoder, mean and sample std over ``cfg.seeds``.

    Writes ``runs.csv`` (one row per seed, flushed as seeds finish),
    ``mse.csv`` and ``summary.csv`` into ``cfg.output``; returns the summary rows.
    """
    data = data or load_dataset(cfg)
    os.makedirs(cfg.output, exist_ok=True)
    runs_path = os.path.join(cfg.output, "runs.csv")
    mse_path = os.path.join(cfg.output, "mse.csv")
    _write_csv(runs_path, RUNS_HEADER, [])
    _write_csv(mse_path, MSE_HEADER, [])
    all_runs: list[DecoderRun] = []
    for seed in cfg.seed_list:
        runs = evaluate_seed(cfg, data, seed)
        all_runs += runs
        _write_csv(
            runs_path, RUNS_HEADER,
            [(r.config, r.seed, R, v, r.scan_s * 1e3) for r in runs for R, v in r.recalls.items()],
            mode="a",
        )
        _write_csv(
            mse_path, MSE_HEADER,
            [(r.config, r.seed, r.train_mse, r.val_mse, r.base_mse) for r in runs],
            mode="a",
        )
    summary = []
    configs = list(dict.fromkeys(r.config for r in all_runs))
    for config in configs:
        rs = [r for r in all_runs if r.config == config]
        for R in rs[0].recalls:
            vals = np.array([r.recalls[R] for r in rs])
            summary.append({
                "config": config,
                "R": R,
                "recall": float(vals.mean()),
                "recall_std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                "scan_ms": float(np.median([r.scan_s for r in rs])) * 1e3,
                "rerank_ms": 0.0,
            })
    _write_csv(os.path.join(cfg.output, "summary.csv"), SUMMARY_HEADER, [tuple(s[k] for k in SUMMARY_HEADER) for s in summary])
    return summary


# --- preliminary (topline) experiment --------------------------------------------


def prelim_grid(cfg: ExperimentConfig, pool: int) -> list[int]:
    grid = [n for n in _ints(cfg.prelim_ntrain) if n <= pool]
    if not grid:
        raise ConfigError(f"no ntrain grid point fits the training pool of {pool} vectors")
    return grid


def _epochs_for(cfg: ExperimentConfig, n: int, tcfg: TrainConfig) -> int:
    if cfg.nn_steps <= 0:
        return tcfg.epochs
    per_epoch = max(1, n // min(tcfg.batch_size, n))
    return min(tcfg.epochs, max(1, math.ceil(cfg.nn_steps / per_epoch)))


def run_preliminary_experiment(
    cfg: ExperimentConfig, pool: np.ndarray | None = None, val: np.ndarray | None = None
) -> list[dict]:
    """Train / validation MSE versus training-set size for ``prelim_bits``-bit codes.

    For every ``ntrain`` the k-means encoder (PQ1 x prelim_bits, skipped when
    ``ntrain`` is below its centroid count) and each PQ m x (bits/m) are trained
    on the first ``ntrain`` pool vectors; PQ codes are decoded naturally, by
    the topline and by the NN decoder. Without explicit arrays the pool and
    validation split come from the configured training data.
    """
    if pool is None:
        pool, val = split_train_val(as_matrix(load_dataset(cfg).train), cfg.nval)
    pool = as_matrix(pool)
    val = as_matrix(val)
    B = cfg.prelim_bits
    grid = prelim_grid(cfg, pool.shape[0])
    seed = cfg.seed_list[0]
    os.makedirs(cfg.output, exist_ok=True)
    path = os.path.join(cfg.output, "prelim.csv")
    _write_csv(path, PRELIM_HEADER, [])
    rows = []

    def emit(n, enc, dec, tr, va):
        row = {"ntrain": n, "encoder": enc, "decoder": dec, "train_mse": tr, "val_mse": va}
        rows.append(row)
        _write_csv(path, PRELIM_HEADER, [tuple(row[k] for k in PRELIM_HEADER)], mode="a")
        log.info("prelim n=%d %s+%s train %.5g val %.5g", n, enc, dec, tr, va)

    for n in grid:
        X = pool[:n]
        if cfg.prelim_kmeans and n >= (1 << B) and B in (8, 16):
            km = pq_train(X, 1, B, seed=seed)
            emit(n, f"kmeans{1 << B}", "natural",
                 mse(X, natural_decode(km, pq_encode(km, X))),
                 mse(val, natural_decode(km, pq_encode(km, val))))
        for m in _ints(cfg.prelim_m):
            if B % m:
                raise ConfigError(f"{B}-bit codes cannot be split into {m} subquantizers")
            b = B // m
            pq = pq_train(X, m, b, seed=seed)
            ctr, cva = pq_encode(pq, X), pq_encode(pq, val)
            label = f"PQ{m}x{b}"
            emit(n, label, "natural", mse(X, natural_decode(pq, ctr)), mse(val, natural_decode(pq, cva)))
            top = topline_fit(ctr, X, lambda c: natural_decode(pq, c))
            emit(n, label, "topline", mse(X, top.decode(ctr)), mse(val, top.decode(cva)))
            tcfg = cfg.train_config(seed, aq_lambda=cfg.lam)
            tcfg = dataclasses.replace(tcfg, epochs=_epochs_for(cfg, n, tcfg))
            params = train_decoder(ctr, X, cva, val, tcfg).params
            emit(n, label, "nn", mse(X, nn_forward(params, ctr)), mse(val, nn_forward(params, cva)))
    return rows


# --- re-ranking sweep --------------------------------------------------------------


def run_rerank_sweep(cfg: ExperimentConfig, data: Dataset | None = None) -> list[dict]:
    """First-stage PQ LUT scan, then NN re-ranking of the top L for every L in the grid.

    Row ``L=0`` is the first stage alone. Times are per query in
    milliseconds, medians over ``timing_reps`` repetitions.
    """
    data = data or load_dataset(cfg)
    if cfg.encoder == "itq":
        raise ConfigError("the re-ranking sweep uses a PQ/OPQ first stage")
    seed = cfg.seed_list[0]
    Xtr, Xva = split_train_val(as_matrix(data.train)[: cfg.ntrain + cfg.nval], cfg.nval)
    gt = data.ground_truth()
    model = train_encoder(cfg.encoder, Xtr, cfg.m, cfg.bits, seed)
    ctr, cva, cb = encode(model, Xtr), encode(model, Xva), encode(model, data.base)
    params = _fit_nn(ctr, Xtr, cva, Xva, cfg.train_config(seed, aq_lambda=cfg.lam))
    grid = sorted(set(cfg.shortlist_grid))
    R = min(max(grid + [max(RECALL_RS)]), cb.n)
    idx = cb.unpack()
    nq = data.query.shape[0]
    reps = max(1, cfg.timing_reps)
    scan_s, first = median_time(lambda: adc_scan_pq(data.query, model, cb, R, idx=idx), reps)

    def strong(ids):
        return nn_forward(params, idx[ids])

    def row(L, res, rerank_s):
        rec = {f"recall_{r}": recall_at(res, gt, r) for r in RECALL_RS if r <= R}
        return {"config": f"{cfg.label}+nn", "L": L, **rec,
                "scan_ms": scan_s / nq * 1e3, "rerank_ms": rerank_s / nq * 1e3}

    rows = [row(0, first, 0.0)]
    for L in grid:
        if L > R:
            continue
        rr_s, res = median_time(lambda: rerank(data.query, first, strong, L), reps)
        rows.append(row(L, res, rr_s))
    os.makedirs(cfg.output, exist_ok=True)
    _write_csv(
        os.path.join(cfg.output, "rerank.csv"), RERANK_HEADER,
        [tuple(r.get(k, float("nan")) for k in RERANK_HEADER) for r in rows],
    )
    return rows


# --- sensitivity sweep --------------------------------------------------------------


def sweep_points(sweep: dict[str, str]) -> list[tuple[str, object]]:
    """One-at-a-time grid: ``(param, value)`` pairs, values parsed per TrainConfig field."""
    points = []
    for key, values in sweep.items():
        for v in str(values).split(","):
            v = v.strip()
            if v:
                points.append((key, _coerce(TrainConfig, key, v)))
    return points


def run_sensitivity_sweep(cfg: ExperimentConfig, data: Dataset | None = None) -> dict[tuple, list[dict]]:
    """Loss curves of the NN decoder on PQ codes, varying one training setting at a time.

    Writes one ``curves/<param>=<value>.csv`` per grid point, the combined
    ``sensitivity.csv`` and ``reference.csv`` with the natural and AQ
    decoders' losses for comparison.
    """
    data = data or load_dataset(cfg)
    points = sweep_points(cfg.sweep)
    if not points:
        raise ConfigError("sensitivity sweep needs at least one sweep.<param> key")
    seed = cfg.seed_list[0]
    Xtr, Xva = split_train_val(as_matrix(data.train)[: cfg.ntrain + cfg.nval], cfg.nval)
    model = train_encoder(cfg.encoder, Xtr, cfg.m, cfg.bits, seed)
    ctr, cva = encode(model, Xtr), encode(model, Xva)
    out_dir = os.path.join(cfg.output, "curves")
    os.makedirs(out_dir, exist_ok=True)
    lut = aq_fit(ctr, Xtr, cfg.lam)
    _write_csv(
        os.path.join(cfg.output, "reference.csv"), REFERENCE_HEADER,
        [("natural", mse(Xtr, natural(model, ctr)), mse(Xva, natural(model, cva))),
         ("aq", mse(Xtr, aq_decode(lut, ctr)), mse(Xva, aq_decode(lut, cva)))],
    )
    curves = {}
    combined = []
    for key, value in points:
        tcfg = cfg.train_config(seed, aq_lambda=cfg.lam, **{key: value})
        history = train_decoder(ctr, Xtr, cva, Xva, tcfg, lut=lut).history
        curves[(key, value)] = history
        rows = [(key, value, h["epoch"], h["train_mse"], h["val_mse"], h["lr"]) for h in history]
        combined += rows
        _write_csv(os.path.join(out_dir, f"{key}={value}.csv"), SENS_HEADER, rows)
    _write_csv(os.path.join(cfg.output, "sensitivity.csv"), SENS_HEADER, combined)
    return curves
