"""Training, detection and sensitivity sweeps.

Random streams are derived from the run seed so that each stage (model
init, training, validation loss, scoring of each split) is reproducible on
its own.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .checkpoint import check_compatible, load_checkpoint, restore, save_checkpoint
from .config import Config, synthetic_config
from .diffusion import (
    EpsilonNet,
    build_schedule,
    compose,
    decontaminate_batch,
    forward_diffuse,
    make_condition,
    noise_loss,
)
from .errors import ConfigError, NumericError
from .graph import GraphHyper, GraphModel, recon_loss, total_loss
from .masking import MaskSpec, make_masks
from .numerics import Adam, no_grad
from .s4 import cached_kernels
from .scoring import (
    ScoreReport,
    ScoreWeights,
    combine,
    metrics,
    score_s1,
    score_s2,
    threshold_search,
)

log = logging.getLogger(__name__)

# sub-stream tags
_INIT, _TRAIN, _VALID, _SCORE = 1, 2, 3, 4


def stream(seed, *tags):
    return np.random.default_rng([int(seed), *tags])


def load_splits(cfg: Config):
    """Train/valid/test datasets from files or the synthetic generator."""
    if cfg["data.path"]:
        root = Path(cfg["data.path"])
        return {s: data_mod.load_dataset(root / f"{s}.tsdc") for s in data_mod.SPLITS}
    return data_mod.generate_synthetic(synthetic_config(cfg), cfg["seed"])


def mask_spec(cfg):
    return MaskSpec(cfg["mask.strategy"], cfg["mask.r"])


def graph_hyper(cfg):
    return GraphHyper(g=cfg["graph.g"], delta=cfg["graph.delta"], zeta=cfg["graph.zeta"],
                      xi1=cfg["graph.xi1"], xi2=cfg["graph.xi2"], xi3=cfg["graph.xi3"])


@dataclass
class Models:
    net: EpsilonNet
    graph: GraphModel
    sched: object
    spec: MaskSpec

    def modules(self):
        return {"decontaminator": self.net, "graph": self.graph}

    def parameters(self):
        return self.net.parameters() + self.graph.parameters()


def build_models(cfg: Config, K, L):
    rng = stream(cfg["seed"], _INIT)
    spec = mask_spec(cfg)
    spec.check(L)
    hyper = graph_hyper(cfg)
    hyper.check(K, L)
    T = cfg["diffusion.T"]
    net = EpsilonNet(K, T, rng, channels=cfg["diffusion.channels"], blocks=cfg["diffusion.blocks"],
                     state_size=cfg["s4.state_size"], bidirectional=cfg["diffusion.bidirectional"])
    graph = GraphModel(K, rng, hyper, embed_dim=cfg["graph.embed_dim"], s4_layers=cfg["s4.layers"],
                       state_size=cfg["s4.state_size"], gin_layers=cfg["graph.gin_layers"],
                       gin_hidden=cfg["graph.gin_hidden"], width=cfg["s4.width"])
    return Models(net, graph, build_schedule(T), spec)


# -- training ----------------------------------------------------------------------------


def batch_loss(models: Models, x, rng, detach_x0=True):
    """Total objective on one batch; returns (loss tensor, component floats)."""
    B, K, L = x.shape
    sched, net = models.sched, models.net
    v = make_masks(models.spec, B, K, L, rng)
    cond = make_condition(x, v)
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x.shape)
    eps_hat = net(forward_diffuse(x, t, eps, sched), t, cond)
    l_noise = noise_loss(eps, eps_hat, v)

    # one-shot estimate from step T, kept values restored
    eps_T = rng.standard_normal(x.shape)
    x_T = forward_diffuse(x, sched.T, eps_T, sched)
    ab = sched.alpha_bar[-1]
    if detach_x0:
        with no_grad():
            eps_hat_T = net(x_T, np.full(B, sched.T), cond).data
        x0 = compose(x, (x_T - math.sqrt(1.0 - ab) * eps_hat_T) / math.sqrt(ab), v)
    else:
        eps_hat_T = net(x_T, np.full(B, sched.T), cond)
        x0 = (eps_hat_T * (-math.sqrt(1.0 - ab)) + x_T) * (1.0 / math.sqrt(ab))
        x0 = x0 * (1.0 - v) + x * v

    x_rec, reg, _, _ = models.graph(x0)
    l_rec = recon_loss(x0, x_rec)
    total = total_loss(l_noise, reg, l_rec)
    parts = {"noise": l_noise.item(), "graph": reg.item(), "recon": l_rec.item()}
    parts["total"] = total.item()
    return total, parts


def _average(rows, weights):
    w = np.asarray(weights, dtype=np.float64)
    return {k: float(np.dot([r[k] for r in rows], w) / w.sum()) for k in rows[0]}


def validation_loss(models: Models, x, cfg):
    """Loss on held-out data with a fixed stream so epochs compare fairly."""
    rng = stream(cfg["seed"], _VALID)
    rows, sizes = [], []
    bs = cfg["train.eval_batch"]
    with no_grad(), cached_kernels():
        for i in range(0, len(x), bs):
            xb = x[i:i + bs]
            _, parts = batch_loss(models, xb, rng)
            rows.append(parts)
            sizes.append(len(xb))
    return _average(rows, sizes)


@dataclass
class TrainResult:
    models: Models
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    seconds: float = 0.0


def _values(ds):
    # only the value array is touched, never labels
    return ds.values if hasattr(ds, "values") else np.asarray(ds, dtype=np.float64)


def fit(cfg: Config, train, valid, models: Models | None = None, progress=None):
    """Train on unlabeled train/valid values with early stopping on validation loss."""
    x_train, x_valid = _values(train), _values(valid)
    N, K, L = x_train.shape
    models = models or build_models(cfg, K, L)
    params = models.parameters()
    opt = Adam(params, lr=cfg["train.lr"])
    rng = stream(cfg["seed"], _TRAIN)
    bs = cfg["train.batch"]
    result = TrainResult(models)
    best, best_state, wait = math.inf, None, 0
    start = time.perf_counter()
    for epoch in range(1, cfg["train.epochs"] + 1):
        order = rng.permutation(N)
        rows, sizes = [], []
        for step, i in enumerate(range(0, N, bs), 1):
            xb = x_train[order[i:i + bs]]
            try:
                with cached_kernels():
                    loss, parts = batch_loss(models, xb, rng, cfg["train.detach_x0"])
                    opt.zero_grad()
                    loss.backward()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
            opt.step()
            rows.append(parts)
            sizes.append(len(xb))
        train_parts = _average(rows, sizes)
        valid_parts = validation_loss(models, x_valid, cfg)
        if not math.isfinite(valid_parts["total"]):
            raise NumericError(f"epoch {epoch}: validation loss is not finite")
        row = {"epoch": epoch}
        row.update({f"train_{k}": v for k, v in train_parts.items()})
        row.update({f"valid_{k}": v for k, v in valid_parts.items()})
        result.history.append(row)
        if progress:
            progress(row)
        log.info("epoch %d train %.5f valid %.5f", epoch, train_parts["total"], valid_parts["total"])
        if valid_parts["total"] < best:
            best, wait, result.best_epoch = valid_parts["total"], 0, epoch
            best_state = [p.data.copy() for p in params]
        else:
            wait += 1
            if wait >= cfg["train.patience"]:
                result.stopped_early = True
                break
    if best_state is not None:
        for p, saved in zip(params, best_state):
            p.data[...] = saved
    result.seconds = time.perf_counter() - start
    return result


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_history(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def save_models(models: Models, cfg: Config, path, extra=None):
    save_checkpoint(path, models.modules(), cfg, extra)


def load_models(path, cfg: Config | None = None, K=None, L=None):
    """Rebuild models from a checkpoint; ``cfg`` (if given) must match its architecture."""
    manifest, arrays = load_checkpoint(path)
    stored = Config(manifest["config"])
    if cfg is not None:
        check_compatible(manifest, cfg)
    K = K or manifest["extra"].get("K")
    L = L or manifest["extra"].get("L")
    if K is None or L is None:
        raise ConfigError("checkpoint does not record K and L; pass them explicitly")
    models = build_models(cfg or stored, K, L)
    restore(models.modules(), arrays)
    return models, stored


# -- scoring -------------------------------------------------------------------------------


def reconstruct(models: Models, x, batch=128):
    parts = []
    with no_grad(), cached_kernels():
        for i in range(0, len(x), batch):
            parts.append(models.graph(x[i:i + batch])[0].data)
    return np.concatenate(parts)


def decontaminate(models: Models, x, rng):
    """Test-mode x0 estimate for one fresh mask draw; returns (x0_hat, masks)."""
    return decontaminate_batch(x, models.spec, models.net, models.sched, rng, mode="test")


def split_scores(models: Models, x, cfg, tag, need_s1=True, need_s2=True):
    """(s1, s2) for every observation of one split; unused parts are zeros."""
    x = np.asarray(x, dtype=np.float64)
    s1 = np.zeros(len(x))
    s2 = np.zeros(len(x))
    if need_s1:
        rng = stream(cfg["seed"], _SCORE, tag)
        reps = cfg["score.repeats"]
        for _ in range(reps):
            x0, v = decontaminate(models, x, rng)
            s1 += score_s1(x, x0, v)
        s1 /= reps
    if need_s2:
        s2 = score_s2(x, reconstruct(models, x, cfg["train.eval_batch"]))
    return s1, s2


@dataclass
class SplitScores:
    s1: np.ndarray
    s2: np.ndarray


def score_splits(models: Models, valid, test, cfg, variants=("12",)):
    weights = [ScoreWeights.for_variant(v, ScoreWeights(cfg["score.lam1"], cfg["score.lam2"]))
               for v in variants]
    need_s1 = any(w.lam1 > 0 for w in weights)
    need_s2 = any(w.lam2 > 0 for w in weights)
    out = {}
    for tag, ds in ((0, valid), (1, test)):
        out[tag] = SplitScores(*split_scores(models, ds.values, cfg, tag, need_s1, need_s2))
    return out[0], out[1]


def report_for(variant, vs: SplitScores, ts: SplitScores, valid, test, cfg):
    """Threshold on validation, evaluate on test."""
    w = ScoreWeights.for_variant(variant, ScoreWeights(cfg["score.lam1"], cfg["score.lam2"]))
    sv = combine(vs.s1, vs.s2, w)
    st = combine(ts.s1, ts.s2, w)
    tau, _, _ = threshold_search(sv, valid.labels)
    return ScoreReport(ids=test.ids, s1=ts.s1, s2=ts.s2, s=st, labels=test.labels, tau=tau,
                       metrics=metrics(st, test.labels, tau))


def detect(models: Models, valid, test, cfg, variant=None):
    variant = variant or cfg["variant"]
    vs, ts = score_splits(models, valid, test, cfg, (variant,))
    return report_for(variant, vs, ts, valid, test, cfg)


def evaluate_variants(models: Models, valid, test, cfg, variants=("1", "2", "12")):
    vs, ts = score_splits(models, valid, test, cfg, variants)
    return {v: report_for(v, vs, ts, valid, test, cfg) for v in variants}


# -- end-to-end runs and sweeps --------------------------------------------------------------


@dataclass
class RunOutcome:
    train: TrainResult
    report: ScoreReport
    splits: dict


def run(cfg: Config, splits=None):
    """Train on the configured data, then score the test split."""
    splits = splits or load_splits(cfg)
    result = fit(cfg, splits["train"], splits["valid"])
    report = detect(result.models, splits["valid"], splits["test"], cfg)
    return RunOutcome(result, report, splits)


SWEEP_AXES = ("masking-strategy", "anomaly-types-n", "anomaly-level")
SWEEP_DEFAULTS = {
    "masking-strategy": ["RandM", "RandBM", "BoM"],
    "anomaly-types-n": [1, 2, 3, 4, 5],
    "anomaly-level": [0.0, 0.1, 0.2, 0.3],
}


def sweep_config(cfg: Config, axis, value):
    """The configuration for one sweep point."""
    if axis == "masking-strategy":
        return cfg.with_(**{"mask__strategy": str(value)})
    if axis == "anomaly-types-n":
        n = int(value)
        if not 1 <= n <= len(data_mod.ANOMALY_TYPES):
            raise ConfigError(f"number of anomaly types must lie in 1..{len(data_mod.ANOMALY_TYPES)}")
        return cfg.with_(data__types=",".join(data_mod.ANOMALY_TYPES[:n]))
    if axis == "anomaly-level":
        # validation keeps its preset rate: the threshold search needs labeled positives
        return cfg.with_(data__rate_train=float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sweep(cfg: Config, axis, values=None, progress=None):
    """One full train + detect per value; rows of (value, F1, Rec, APR).

    The test split does not depend on train/valid settings, so it stays fixed
    across points.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = SWEEP_DEFAULTS[axis] if values is None else list(values)
    if cfg["data.path"] and axis != "masking-strategy":
        raise ConfigError(f"sweep axis {axis} regenerates data and needs a synthetic preset")
    rows = []
    for value in values:
        point = sweep_config(cfg, axis, value)
        outcome = run(point)
        m = outcome.report.metrics
        rows.append({"value": value, "F1": m["F1"], "Rec": m["Rec"], "APR": m["APR"],
                     "tau": outcome.report.tau, "epochs": len(outcome.train.history)})
        if progress:
            progress(rows[-1])
    return rows


def write_rows(rows, path, fields=None):
    fields = fields or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()
                        if k in fields})
