"""Training runs, repeats, sweeps, point clouds and verification suites."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import stats

from . import conv as C
from . import data as D
from . import divergence as V
from . import layers as L
from .layers import ConfigurationError
from .model import (ACTIVATIONS, CONV_PRESETS, INIT_SCHEME, NORMALISERS, build_conv,
                    build_mlp)
from .optim import AdamConfig, AdamState, SgdConfig, adam_step, gradient_only_policy, sgd_step
from .tensor import NonFiniteError, Rng

TRAIN_FIELDS = ["epoch", "repeat", "seed", "test_acc", "train_loss"]
SUMMARY_FIELDS = ["epoch", "repeats", "test_acc_mean", "test_acc_se", "train_loss_mean", "train_loss_se"]
SWEEP_FIELDS = ["kind", "value", "repeat", "seed", "test_acc", "train_loss"]
FIT_FIELDS = ["kind", "points", "slope", "slope_se", "intercept"]
CLOUD_FIELDS = ["input_x", "input_y", "output_x", "output_y"]


@dataclass(frozen=True)
class ExperimentConfig:
    arch: tuple = (3072, 32, 10)
    normaliser: str = "none"
    activation: str = "tanh"
    epochs: int = 1
    batch_size: int = 32
    eta: float = 0.001
    optimizer: str = "sgd"
    repeats: int = 1
    seed: int = 0
    data: str = "cifar10"
    standardize: bool = False
    model: str = "mlp"
    channels: int = 16
    synthetic_train: int = 2000
    synthetic_test: int = 500
    init: str = INIT_SCHEME

    def __post_init__(self):
        object.__setattr__(self, "arch", tuple(int(a) for a in self.arch))
        if self.model == "mlp" and (len(self.arch) < 2 or min(self.arch) < 1):
            raise ConfigurationError(f"arch needs at least two positive widths, got {list(self.arch)}")
        if self.normaliser not in NORMALISERS:
            raise ConfigurationError(f"unknown normaliser {self.normaliser!r}; choose from {', '.join(NORMALISERS)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}; choose from {', '.join(ACTIVATIONS)}")
        if self.model not in ("mlp",) + CONV_PRESETS:
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.data not in ("cifar10", "synthetic"):
            raise ConfigurationError(f"unknown data source {self.data!r}")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")

    @classmethod
    def from_mapping(cls, values: dict):
        """Build from string or typed values, e.g. a parsed key=value file."""
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            default = known[key].default
            kw[key] = _coerce(raw, default, key)
        return cls(**kw)

    def fingerprint(self) -> str:
        """sha256 over the canonical JSON of every field."""
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def repeat_seed(self, repeat: int) -> int:
        return self.seed + repeat


def _coerce(raw, default, key):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value {raw!r} for {key}") from None
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{no}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


@dataclass
class RunRecord:
    fingerprint: str
    repeat: int
    seed: int
    test_acc: list = field(default_factory=list)  # percent, per epoch
    train_loss: list = field(default_factory=list)
    wall_time: float = 0.0

    def rows(self):
        return [{"epoch": e + 1, "repeat": self.repeat, "seed": self.seed,
                 "test_acc": a, "train_loss": l}
                for e, (a, l) in enumerate(zip(self.test_acc, self.train_loss))]


# -- data and models ---------------------------------------------------------

def load_data(cfg: ExperimentConfig, path=None):
    if cfg.data == "synthetic":
        classes = 10 if cfg.model != "mlp" else cfg.arch[-1]
        dim = 3072 if cfg.model != "mlp" else cfg.arch[0]
        train = D.synthetic_gaussian(cfg.synthetic_train, dim, classes, cfg.seed, split=0)
        test = D.synthetic_gaussian(cfg.synthetic_test, dim, classes, cfg.seed, split=1)
        return train, test
    return D.load_cifar10(path, standardize=cfg.standardize)


def build_model(cfg: ExperimentConfig, seed: int):
    rng = Rng(seed, 0x1A17)
    if cfg.model == "mlp":
        return build_mlp(cfg.arch, cfg.normaliser, cfg.activation, rng)
    return build_conv(cfg.model, cfg.normaliser, cfg.activation, rng, channels=cfg.channels)


def accuracy(model, ds: D.Dataset, images: bool) -> float:
    X = ds.images if images else ds.features
    pred = model.predict(X).argmax(axis=1)
    return float(100.0 * np.mean(pred == ds.labels))


def train_run(cfg: ExperimentConfig, repeat: int, train: D.Dataset, test: D.Dataset) -> RunRecord:
    seed = cfg.repeat_seed(repeat)
    model = build_model(cfg, seed)
    images = cfg.model != "mlp"
    plan = D.BatchPlan(seed=seed, batch_size=cfg.batch_size)
    mult = model.multipliers()
    if cfg.optimizer == "sgd":
        opt_cfg = SgdConfig(cfg.eta, mult)
    else:
        opt_cfg = AdamConfig(cfg.eta, per_layer_multiplier=mult)
    state = AdamState()
    rec = RunRecord(cfg.fingerprint(), repeat, seed)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for X, y in D.batches(train, plan, epoch, images=images):
            loss, g = L.softmax_cross_entropy(model.forward(X), y)
            if not np.isfinite(loss):
                raise NonFiniteError(f"training loss diverged at epoch {epoch + 1}")
            model.backward(g)
            params, grads = model.param_tree(), model.grad_tree()
            if cfg.optimizer == "sgd":
                new = sgd_step(params, grads, opt_cfg)
            else:
                new, state = adam_step(state, params, grads, opt_cfg)
            model.apply_tree(new)
            total += loss * len(y)
            count += len(y)
        rec.train_loss.append(total / count)
        rec.test_acc.append(accuracy(model, test, images))
    rec.wall_time = time.perf_counter() - start
    return rec


_SHARED: dict = {}


def _init_worker(train, test):
    _SHARED["train"], _SHARED["test"] = train, test


def _run_shared(args):
    cfg, repeat = args
    return train_run(cfg, repeat, _SHARED["train"], _SHARED["test"])


def run_repeats(cfg: ExperimentConfig, train: D.Dataset, test: D.Dataset, jobs: int = 1) -> list[RunRecord]:
    """All repeats of ``cfg``, ordered by repeat index whatever ``jobs`` is."""
    tasks = [(cfg, r) for r in range(cfg.repeats)]
    if jobs <= 1 or cfg.repeats == 1:
        return [train_run(c, r, train, test) for c, r in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(train, test)) as ex:
        records = list(ex.map(_run_shared, tasks))
    return sorted(records, key=lambda r: r.repeat)


# -- summaries ---------------------------------------------------------------

def mean_se(values):
    """Mean and standard error (sample std / sqrt(n)); the error is nan for n = 1."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def summarize(records: list[RunRecord]):
    out = []
    for e in range(len(records[0].test_acc)):
        am, ase = mean_se([r.test_acc[e] for r in records])
        lm, lse = mean_se([r.train_loss[e] for r in records])
        out.append({"epoch": e + 1, "repeats": len(records), "test_acc_mean": am, "test_acc_se": ase,
                    "train_loss_mean": lm, "train_loss_se": lse})
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(rows, fieldnames, fh, formats=None):
    formats = formats or {}
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(fieldnames)
    for row in rows:
        w.writerow([formats.get(k, _fmt)(row[k]) for k in fieldnames])


SUMMARY_FORMATS = {"test_acc_mean": lambda v: f"{v:.2f}", "test_acc_se": lambda v: f"{v:.2f}"}


def train_rows(records):
    return [row for rec in records for row in rec.rows()]


# -- sweeps ------------------------------------------------------------------

@dataclass
class SlopeFit:
    slope: float
    slope_se: float
    intercept: float
    points: int


def fit_slope(x, y) -> SlopeFit:
    """Ordinary least squares y = a + s x, with the standard error of s."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2:
        raise ConfigurationError("a slope fit needs at least 2 grid points")
    if np.all(x == x[0]):
        raise ConfigurationError("grid values must not all be equal")
    if np.all(y == y[0]):
        return SlopeFit(0.0, 0.0, float(y[0]), x.size)
    res = stats.linregress(x, y)
    return SlopeFit(float(res.slope), float(res.stderr), float(res.intercept), x.size)


def sweep_config(cfg: ExperimentConfig, kind: str, value: int) -> ExperimentConfig:
    if kind == "width":
        if cfg.model != "mlp":
            raise ConfigurationError("width sweeps apply to dense nets")
        arch = (cfg.arch[0],) + (int(value),) * (len(cfg.arch) - 2) + (cfg.arch[-1],)
        return replace(cfg, arch=arch)
    if kind == "batch_size":
        return replace(cfg, batch_size=int(value))
    raise ConfigurationError(f"unknown sweep kind {kind!r}; choose width or batch_size")


def run_sweep(cfg: ExperimentConfig, kind: str, grid, train, test, jobs: int = 1):
    """Final-epoch accuracy for every grid value and repeat, plus the slope of the mean."""
    grid = [int(v) for v in grid]
    if len(grid) < 2:
        raise ConfigurationError("a sweep grid needs at least 2 values")
    for v in grid:
        sweep_config(cfg, kind, v)
    rows, means = [], []
    for v in grid:
        records = run_repeats(sweep_config(cfg, kind, v), train, test, jobs)
        for r in records:
            rows.append({"kind": kind, "value": v, "repeat": r.repeat, "seed": r.seed,
                         "test_acc": r.test_acc[-1], "train_loss": r.train_loss[-1]})
        means.append(np.mean([r.test_acc[-1] for r in records]))
    return rows, fit_slope(grid, means)


# -- point clouds ------------------------------------------------------------

CLOUD_NORMALISERS = ("none", "batchnorm", "layernorm", "rmsnorm", "l2", "affine_like")
_CLOUD_ALIASES = {"l2_full": "l2", "l2_half": "l2", "affine_correction": "affine_like"}


def cloud_points(normaliser: str, n: int = 1000, seed: int = 0):
    """Standard-normal 2-D points and their image under a parameterless normaliser.

    Normalisers are used in their exact geometric form (no epsilon) so that
    their collapse sets are visible; affine_like uses W = I, b = 0.
    """
    name = _CLOUD_ALIASES.get(normaliser, normaliser)
    if name not in CLOUD_NORMALISERS:
        raise ConfigurationError(f"unknown normaliser {normaliser!r}; choose from {', '.join(CLOUD_NORMALISERS)}")
    X = D.synthetic_gaussian(n, 2, classes=1, seed=seed).features
    if name == "none":
        Y = X.copy()
    elif name == "batchnorm":
        Y, _ = L.batchnorm_forward(X, eps=0.0)
    elif name == "layernorm":
        Y, _ = L.layernorm_forward(X, eps=0.0)
    elif name == "rmsnorm":
        Y, _ = L.rmsnorm_forward(X)
    elif name == "l2":
        Y, _ = L.l2norm_forward(X)
    else:
        Y, _ = L.affine_like_forward(L.AffineParams(np.eye(2), np.zeros(2)), X)
    return X, Y


def cloud_rows(X, Y):
    return [{"input_x": a[0], "input_y": a[1], "output_x": b[0], "output_y": b[1]} for a, b in zip(X, Y)]


# -- verification suites -----------------------------------------------------

@dataclass
class SuiteResult:
    suite: str
    passed: bool
    lines: list
    rows: list = field(default_factory=list)


def verify_affine(trials: int = 100, tol: float = V.DEFAULT_TOL, seed: int = 0):
    lines, rows, ok = [], [], True
    expected = {"affine": "|x|^2 + 1", "affine_like": "1", "norm_like": "2"}
    for kind in ("affine", "affine_like", "norm_like"):
        reps = V.divergence_trials(kind, trials, seed=seed, tol=tol)
        good = sum(r.passed for r in reps)
        ok &= good == trials
        rows += [r.row() for r in reps]
        lines.append(f"{kind}: effective = g * ({expected[kind]}), {good}/{trials} residuals < {tol:g}, "
                     f"max residual {max(r.residual for r in reps):.3e}")
    for kind in ("affine_like", "norm_like"):
        rep = V.verify_backward_formulas(kind, trials=min(trials, 50), seed=seed)
        ok &= rep.passed
        lines.append(f"{kind} backward: closed-form gap {rep.max_analytic_gap:.2e}, "
                     f"finite-difference error {rep.max_fd_error:.2e}, geometry ok={rep.sweep.get('ok')}")
    return SuiteResult("affine", ok, lines, rows)


def verify_batched(trials: int = 20, tol: float = V.DEFAULT_TOL, seed: int = 0):
    lines, rows, ok = [], [], True
    for kind in ("affine", "affine_like", "norm_like"):
        for B in (2, 4, 8):
            reps = V.divergence_trials(kind, trials, B=B, seed=seed + B, tol=tol)
            good = sum(r.passed for r in reps)
            dominated = True
            if kind != "affine":
                dominated = all(offdiag_dominated(r.mixing) for r in reps)
            ok &= good == trials and dominated
            rows += [r.row() for r in reps]
            lines.append(f"{kind} B={B}: {good}/{trials} match M g, off-diagonal <= diagonal: {dominated}")
    return SuiteResult("batched", ok, lines, rows)


def offdiag_dominated(mix) -> bool:
    """|M_bk| <= min(M_bb, M_kk) for every off-diagonal entry."""
    d = mix.diagonal
    return bool(np.all(np.abs(mix.off_diagonal) <= np.minimum.outer(d, d) * (1 + 1e-12)))


def verify_conv(trials: int = 50, tol: float = 1e-12, seed: int = 0):
    worst, worst_1x1 = 0.0, 0.0
    rows = []
    for t in range(trials):
        rng = Rng(seed, 0xC0, t)
        Cin, Cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        H, W = int(rng.integers(k, 8)), int(rng.integers(k, 8))
        spec = C.ConvSpec(Cin, Cout, k, k, stride, pad)
        params = C.ConvParams(rng.normal((Cout, Cin, k, k)), rng.normal(Cout))
        x = rng.normal((2, Cin, H, W))
        y, _ = C.conv_forward(spec, params, x)
        ref = C.direct_conv(spec, params, x)
        err = float(np.max(np.abs(y - ref)) / max(np.max(np.abs(ref)), 1e-300))
        worst = max(worst, err)
        spec1 = C.ConvSpec(Cin, Cout, 1, 1)
        p1 = C.ConvParams(rng.normal((Cout, Cin, 1, 1)), rng.normal(Cout))
        y1, _ = C.patchnorm_forward(spec1, p1, x, "affine_like")
        pix = x.transpose(0, 2, 3, 1).reshape(-1, Cin)
        z, _ = L.affine_like_forward(L.AffineParams(p1.matrix, p1.b), pix)
        ref1 = z.reshape(2, H, W, Cout).transpose(0, 3, 1, 2)
        worst_1x1 = max(worst_1x1, float(np.max(np.abs(y1 - ref1)) / np.max(np.abs(ref1))))
        rows.append({"trial": t, "unroll_vs_direct": err})
    ok = worst < tol and worst_1x1 < tol
    lines = [f"unroll+matmul vs direct: {trials} trials, max relative error {worst:.2e} (tol {tol:g})",
             f"1x1 PatchNorm vs pixelwise affine-like: max relative error {worst_1x1:.2e}"]
    return SuiteResult("conv", ok, lines, rows)


def verify_attention(trials: int = 10, seed: int = 0):
    rep = V.attention_divergence_check(trials=trials, seed=seed)
    lit = V.attention_divergence_check(trials=trials, seed=seed, literal=True)
    r = rep.checked
    lines = [f"residual ratio at eta vs eta/2: min {r.min():.4f}, max {r.max():.4f} over {r.size} trials "
             f"(expected 4 +- 0.5, {rep.masked} below round-off), second-order gap {rep.second_order_gap:.2e}",
             f"with G^T in the key term instead: mean ratio {lit.checked.mean():.3f}"]
    rows = [{"trial": i, "ratio": r} for i, r in enumerate(rep.ratios)]
    return SuiteResult("attention", rep.passed, lines, rows)


def verify_lr_policy(trials: int = 20, tol: float = V.DEFAULT_TOL, seed: int = 0):
    lines, rows, ok = [], [], True
    for policy in ("global", "local"):
        worst = 0.0
        for t in range(trials):
            rng = Rng(seed, 0x1F, t)
            n = (2, 8, 64)[t % 3]
            layer = V.random_layer("affine", n, 4, rng)
            x, g = rng.normal((1, n)), rng.normal((1, 4))
            rep = V.lr_policy_check(policy, layer, x, g)
            if policy == "local":
                # each of the two parts carries half the ideal step
                part = max(V.relative_residual(rep.weight_part, g / 2), V.relative_residual(rep.bias_part, g / 2))
                worst = max(worst, rep.residual, part)
            else:
                worst = max(worst, rep.residual)
            rows.append({"policy": policy, "trial": t, "residual": rep.residual})
        ok &= worst < tol
        lines.append(f"{policy}: {trials} trials, max residual vs ideal {worst:.2e}")
    try:
        gradient_only_policy("global", np.ones((2, 3)))
        ok = False
        lines.append("global policy accepted a batch of 2")
    except ConfigurationError:
        lines.append("global policy rejects batches larger than 1")
    return SuiteResult("lr_policy", ok, lines, rows)


SUITES = {"affine": verify_affine, "batched": verify_batched, "conv": verify_conv,
          "attention": verify_attention, "lr_policy": verify_lr_policy}


def run_suite(name: str, trials: int | None = None, tol: float | None = None, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    fn = SUITES[name]
    kw = {"seed": seed}
    if trials is not None:
        kw["trials"] = trials
    if tol is not None and name != "attention":
        kw["tol"] = tol
    return fn(**kw)
