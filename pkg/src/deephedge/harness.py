"""Experiment configuration, training loop, evaluation, and metrics.

One YAML config describes the whole experiment: market, instrument grid,
cliquet, costs, policy, both optimizer settings, data sizes, and the
training schedule. All randomness derives from the single root seed
through tagged streams, so a config determines its datasets, its
initialization, and its optimization trajectory bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import contracts as ct
from . import diffcore as dc
from . import market as mk
from . import optim as op
from . import policy as pol
from . import rngstreams as rs

log = logging.getLogger(__name__)

METRICS_HEADER = ("iteration,train_loss,val_loss,eta,rho_tr,"
                  "grad_variance,max_precond_scale,wall_ms")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DataConfig:
    n_train: int = 50_000
    n_val: int = 10_000
    n_test: int = 10_000


@dataclass
class TrainingConfig:
    batch_size: int = 512
    max_iterations: int = 2000
    val_every: int = 20
    probe_every: int = 100
    probe_paths: int = 64
    val_target: float | None = None
    divergence_factor: float = 10.0
    divergence_patience: int = 50


@dataclass
class ExperimentConfig:
    market: mk.HestonParams
    dt: float
    substeps: int
    grid: ct.GridSpec
    cliquet: ct.CliquetSpec
    costs: ct.CostSpec
    risk_aversion: float
    policy: pol.PolicyConfig
    optimizer_name: str
    kfac: op.KfacConfig
    adam: op.AdamConfig
    data: DataConfig
    training: TrainingConfig
    seed: int

    def as_dict(self) -> dict:
        return {
            "market": asdict(self.market),
            "dt": self.dt,
            "substeps": self.substeps,
            "grid": [[o.tau_steps, o.log_moneyness] for o in self.grid.entries],
            "cliquet": {"cap": self.cliquet.cap, "resets": list(self.cliquet.resets)},
            "costs": asdict(self.costs),
            "risk_aversion": self.risk_aversion,
            "policy": asdict(self.policy),
            "optimizer": {"name": self.optimizer_name,
                          "kfac": asdict(self.kfac), "adam": asdict(self.adam)},
            "data": asdict(self.data),
            "training": asdict(self.training),
            "seed": self.seed,
        }

    def identity_hash(self) -> int:
        """Hash of everything that defines the experiment's data and model;
        the optimizer choice is excluded so paired runs share checkpoints."""
        d = self.as_dict()
        d.pop("optimizer")
        return ckpt.config_hash(d)


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"missing '{key}' in {where}")
    return mapping[key]


def load_config(path, optimizer_override: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return build_config(raw, optimizer_override)


def build_config(raw: dict, optimizer_override: str | None = None) -> ExperimentConfig:
    try:
        m = _require(raw, "market", "config")
        market = mk.HestonParams(
            x0=float(m.get("x0", 1.0)), v0=float(m.get("v0", 0.0625)),
            kappa=float(m.get("kappa", 8.0)), theta=float(m.get("theta", 0.0625)),
            xi=float(m.get("xi", 1.0)), rho=float(m.get("rho", -0.7)))
        dt = float(m.get("dt", 1.0 / 250.0))
        substeps = int(m.get("substeps", 2))
        grid_map = {int(k): [float(x) for x in v]
                    for k, v in _require(raw, "grid", "config").items()}
        grid = ct.GridSpec.from_ratio_map(grid_map)
        cl = _require(raw, "cliquet", "config")
        cliquet = ct.CliquetSpec(cap=float(cl["cap"]),
                                 resets=tuple(int(r) for r in cl["resets"]))
        co = raw.get("costs", {})
        costs = ct.CostSpec(spot_cost=float(co.get("spot", 1e-4)),
                            option_cost=float(co.get("option", 1e-2)),
                            l2_multiplier=float(co.get("l2_multiplier", 8.0)))
        gamma = float(raw.get("objective", {}).get("risk_aversion", 1000.0))
        p = raw.get("policy", {})
        policy_cfg = pol.PolicyConfig(
            action_dim=grid.d, hidden=int(p.get("hidden", 32)),
            n_blocks=int(p.get("blocks", 4)),
            head_scale=float(p.get("head_scale", 1e-3)))
        o = raw.get("optimizer", {})
        name = optimizer_override or o.get("name", "kfac")
        if name not in ("kfac", "adam"):
            raise ConfigError(f"unknown optimizer '{name}'")
        kfac = op.KfacConfig(**o.get("kfac", {}))
        adam = op.AdamConfig(**o.get("adam", {}))
        dcfg = DataConfig(**{k: int(v) for k, v in raw.get("data", {}).items()})
        tr_raw = dict(raw.get("training", {}))
        if "val_target" in tr_raw and tr_raw["val_target"] is not None:
            tr_raw["val_target"] = float(tr_raw["val_target"])
        tcfg = TrainingConfig(**tr_raw)
        seed = int(_require(raw, "seed", "config"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc
    if cliquet.maturity != max(cliquet.resets):
        raise ConfigError("cliquet maturity must be the last reset")
    for opt in grid.entries:
        if opt.tau_steps > cliquet.maturity:
            raise ConfigError(f"grid option with tau={opt.tau_steps} exceeds the horizon")
    if tcfg.batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    if dcfg.n_train < tcfg.batch_size:
        raise ConfigError("n_train must be at least one batch")
    return ExperimentConfig(
        market=market, dt=dt, substeps=substeps, grid=grid, cliquet=cliquet,
        costs=costs, risk_aversion=gamma, policy=policy_cfg, optimizer_name=name,
        kfac=kfac, adam=adam, data=dcfg, training=tcfg, seed=seed)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    role: str
    paths: mk.PathSet
    features: np.ndarray   # (n, T, 6)
    returns: np.ndarray    # (n, T, d)
    premiums: np.ndarray | None
    mask: np.ndarray       # (T, d)
    payoff: np.ndarray     # (n,)

    @property
    def n_paths(self) -> int:
        return self.paths.n_paths

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.paths.spot, self.paths.variance, self.returns, self.payoff):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


_ROLE_STREAMS = {"train": rs.MARKET_TRAIN, "val": rs.MARKET_VAL, "test": rs.MARKET_TEST}


def make_cached_pricer(cfg: ExperimentConfig, v_max: float) -> mk.CachedGridPricer:
    base = mk.HestonPricer(cfg.market, cfg.dt)
    contracts_list = [(o.tau_steps, o.log_moneyness) for o in cfg.grid.entries]
    return mk.CachedGridPricer(base, contracts_list, v_max=v_max)


def build_dataset(cfg: ExperimentConfig, role: str, pricer=None,
                  paths: mk.PathSet | None = None, keep_premiums: bool = False) -> Dataset:
    if role not in _ROLE_STREAMS:
        raise ConfigError(f"unknown dataset role '{role}'")
    n = {"train": cfg.data.n_train, "val": cfg.data.n_val, "test": cfg.data.n_test}[role]
    if paths is None:
        paths = mk.simulate(cfg.market, n, cfg.cliquet.maturity, cfg.dt,
                            substeps=cfg.substeps, seed=cfg.seed,
                            stream=_ROLE_STREAMS[role])
    if pricer is None:
        pricer = make_cached_pricer(cfg, v_max=float(paths.variance.max()) * 1.02 + 1e-6)
    returns, premiums, mask = ct.grid_returns(paths, cfg.grid, pricer)
    features = ct.feature_tensor(paths, cfg.cliquet)
    payoff = ct.cliquet_payoff_batch(paths.spot, cfg.cliquet)
    return Dataset(role=role, paths=paths, features=features, returns=returns,
                   premiums=premiums if keep_premiums else None,
                   mask=mask, payoff=payoff)


def build_datasets(cfg: ExperimentConfig, roles=("train", "val"),
                   train_paths: mk.PathSet | None = None) -> dict[str, Dataset]:
    path_sets = {}
    for role in roles:
        if role == "train" and train_paths is not None:
            path_sets[role] = train_paths
        else:
            n = {"train": cfg.data.n_train, "val": cfg.data.n_val,
                 "test": cfg.data.n_test}[role]
            path_sets[role] = mk.simulate(cfg.market, n, cfg.cliquet.maturity, cfg.dt,
                                          substeps=cfg.substeps, seed=cfg.seed,
                                          stream=_ROLE_STREAMS[role])
    v_max = max(float(ps.variance.max()) for ps in path_sets.values()) * 1.02 + 1e-6
    pricer = make_cached_pricer(cfg, v_max)
    return {role: build_dataset(cfg, role, pricer=pricer, paths=ps,
                                keep_premiums=(role == "test"))
            for role, ps in path_sets.items()}


# ---------------------------------------------------------------------------
# loss evaluation helpers


def dataset_objective(params: pol.PolicyParams, ds: Dataset, gamma: float,
                      costs: ct.CostSpec) -> float:
    """Validation-style loss on a full dataset: same estimator as training
    (unbiased PnL variance plus mean costs), forward-only."""
    res = pol.rollout(params, ds.features, ds.mask, record=False)
    return ct.objective_value(res.actions, ds.returns, ds.payoff, gamma, costs)


def probe_gradient_variance(params: pol.PolicyParams, ds: Dataset, gamma: float,
                            costs: ct.CostSpec, n_probe: int) -> float:
    """Trace of the empirical covariance of single-path gradient estimates.

    The probe batch is the first ``n_probe`` paths of the dataset. Each
    path's contribution to the batch gradient, scaled by the batch size,
    estimates a single-sample gradient; hook channels reconstruct the
    per-path weight gradients, so the metric covers the Kronecker-block
    parameters (weight matrices).
    """
    n = min(n_probe, ds.n_paths)
    res = pol.rollout(params, ds.features[:n], ds.mask, capture=True, validate=False)
    loss = ct.batch_objective(res.action_nodes, ds.returns[:n], ds.payoff[:n],
                              gamma, costs)
    dc.backward(loss, hooks=res.channels.values())
    sq_sum = 0.0
    mean_sq = 0.0
    for channel in res.channels.values():
        a_stack = np.stack(channel.activations)   # (T, n, in+1)
        g_stack = np.stack(channel.grads)         # (T, n, out)
        per_path = np.einsum("tpo,tpi->poi", g_stack, a_stack) * n
        sq_sum += float((per_path ** 2).sum())
        mean_grad = per_path.mean(axis=0)
        mean_sq += float((mean_grad ** 2).sum())
    if n < 2:
        return 0.0
    return (sq_sum / n - mean_sq) * n / (n - 1)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    iterations_run: int
    final_val_loss: float
    reached_target: bool
    target_iteration: int | None


def _limit_blas_threads():
    # The unroll's matrix products are small; threaded BLAS loses more to
    # synchronization than it gains. Applied once, process wide.
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(1)
    except Exception:  # pragma: no cover
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")


def _train_iteration_kfac(cfg, params, kfac, ds_train, idx, iteration):
    gamma, costs = cfg.risk_aversion, cfg.costs
    capture = kfac.wants_input_stats
    res = pol.rollout(params, ds_train.features[idx], ds_train.mask,
                      capture=capture, validate=False)
    if capture:
        kfac.update_input_stats(res.channels, batch_size=idx.size)

    pick = int(rs.stream(cfg.seed, rs.PSEUDO_PATH, iteration).integers(idx.size))
    row = int(idx[pick])
    path_returns = ds_train.returns[row]
    hessian = ct.inner_hessian(path_returns, gamma, costs)
    feats_row = ds_train.features[row:row + 1]

    def pseudo_rollout(p):
        return pol.rollout(p, feats_row, ds_train.mask, capture=True, validate=False)

    noise = rs.stream(cfg.seed, rs.PSEUDO_NOISE, iteration)
    pseudo = op.pseudo_backward(params, pseudo_rollout, hessian, noise)
    kfac.update_output_stats(pseudo)
    if kfac.wants_eigenbasis:
        kfac.update_eigenbasis()

    loss_node = ct.batch_objective(res.action_nodes, ds_train.returns[idx],
                                   ds_train.payoff[idx], gamma, costs)
    loss = float(loss_node.value[0, 0])
    grads = dc.backward(loss_node)
    _check_finite_training(cfg, params, ds_train, idx, loss, grads)
    pre = kfac.precondition(grads)
    eta = kfac.apply_step(params, pre, grads)
    return loss, eta


def _train_iteration_adam(cfg, params, adam, ds_train, idx):
    gamma, costs = cfg.risk_aversion, cfg.costs
    res = pol.rollout(params, ds_train.features[idx], ds_train.mask, validate=False)
    loss_node = ct.batch_objective(res.action_nodes, ds_train.returns[idx],
                                   ds_train.payoff[idx], gamma, costs)
    loss = float(loss_node.value[0, 0])
    grads = dc.backward(loss_node)
    _check_finite_training(cfg, params, ds_train, idx, loss, grads)
    eta = adam.apply_step(params, grads)
    return loss, eta


def _check_finite_training(cfg, params, ds_train, idx, loss, grads):
    """Deferred validation: if anything came out non-finite, rebuild the
    iteration eagerly so the failing tape node is named exactly."""
    ok = math.isfinite(loss) and all(math.isfinite(float(g.sum())) for g in grads.values())
    if ok:
        return
    res = pol.rollout(params, ds_train.features[idx], ds_train.mask, validate=True)
    loss_node = ct.batch_objective(res.action_nodes, ds_train.returns[idx],
                                   ds_train.payoff[idx], cfg.risk_aversion, cfg.costs)
    dc.backward(loss_node)
    raise dc.DiffError("non-finite training state (validated rerun did not localize it)")


def train(cfg: ExperimentConfig, outdir, resume_from=None,
          train_paths: mk.PathSet | None = None,
          datasets: dict[str, Dataset] | None = None) -> TrainResult:
    """Run the configured optimizer; writes metrics, manifest, checkpoint."""
    _limit_blas_threads()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if datasets is None:
        datasets = build_datasets(cfg, ("train", "val"), train_paths=train_paths)
    ds_train, ds_val = datasets["train"], datasets["val"]
    gamma, costs = cfg.risk_aversion, cfg.costs
    tcfg = cfg.training

    params = pol.init_params(cfg.policy, rs.stream(cfg.seed, rs.POLICY_INIT))
    if cfg.optimizer_name == "kfac":
        optimizer = op.KfacOptimizer(params, cfg.kfac)
    else:
        optimizer = op.AdamOptimizer(params, cfg.adam)
    start = 0
    if resume_from is not None:
        records, cfg_hash, kind, opt_version = ckpt.load_records(resume_from)
        if cfg_hash != cfg.identity_hash():
            raise ckpt.CheckpointError("checkpoint does not match this config")
        if kind != cfg.optimizer_name:
            raise ckpt.CheckpointError(
                f"checkpoint holds {kind} state, config wants {cfg.optimizer_name}")
        for name in params.values:
            params.values[name] = records[name].copy()
        optimizer.load_state_records(records)
        start = optimizer.step_count

    manifest = {
        "config": cfg.as_dict(),
        "identity_hash": cfg.identity_hash(),
        "datasets": {role: ds.content_hash() for role, ds in datasets.items()},
        "resumed_from_iteration": start,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    metrics_path = outdir / "metrics.csv"
    mode = "a" if (resume_from is not None and metrics_path.exists()) else "w"
    metrics = open(metrics_path, mode)
    if mode == "w":
        metrics.write(METRICS_HEADER + "\n")

    batches_per_epoch = ds_train.n_paths // tcfg.batch_size
    order = None
    order_epoch = -1
    initial_val = None
    divergence_run = 0
    reached = False
    target_iteration = None
    val_loss = float("nan")

    try:
        for it in range(start, tcfg.max_iterations):
            t0 = time.perf_counter()
            epoch, j = divmod(it, batches_per_epoch)
            if epoch != order_epoch:
                order = rs.stream(cfg.seed, rs.BATCH_SHUFFLE, epoch).permutation(ds_train.n_paths)
                order_epoch = epoch
            idx = order[j * tcfg.batch_size:(j + 1) * tcfg.batch_size]

            if cfg.optimizer_name == "kfac":
                train_loss, eta = _train_iteration_kfac(cfg, params, optimizer,
                                                        ds_train, idx, it)
                rho_tr = optimizer.rho_tr
                max_scale = optimizer.max_damped_scale()
            else:
                train_loss, eta = _train_iteration_adam(cfg, params, optimizer,
                                                        ds_train, idx)
                rho_tr = float("nan")
                max_scale = float("nan")

            grad_var = float("nan")
            if tcfg.probe_every > 0 and it % tcfg.probe_every == 0:
                grad_var = probe_gradient_variance(params, ds_train, gamma, costs,
                                                   tcfg.probe_paths)

            new_val = float("nan")
            if it % tcfg.val_every == 0:
                new_val = dataset_objective(params, ds_val, gamma, costs)
                val_loss = new_val
                if initial_val is None:
                    initial_val = new_val
                if new_val > tcfg.divergence_factor * initial_val:
                    divergence_run += 1
                    if divergence_run >= tcfg.divergence_patience:
                        raise TrainingDiverged(
                            f"validation loss {new_val:.4g} above "
                            f"{tcfg.divergence_factor} x initial {initial_val:.4g} "
                            f"for {divergence_run} consecutive evaluations")
                else:
                    divergence_run = 0
                if tcfg.val_target is not None and new_val <= tcfg.val_target:
                    reached = True
                    target_iteration = it

            wall_ms = (time.perf_counter() - t0) * 1e3
            metrics.write(_metrics_row(it, train_loss, new_val, eta, rho_tr,
                                       grad_var, max_scale, wall_ms))
            if reached:
                break
    finally:
        metrics.close()

    iterations_run = (target_iteration + 1) if reached else tcfg.max_iterations
    ckpt_path = outdir / "checkpoint.dhck"
    records = dict(params.values)
    records.update(optimizer.state_records())
    ckpt.save_records(ckpt_path, records, cfg.identity_hash(),
                      cfg.optimizer_name, optimizer.STATE_VERSION)
    final_val = val_loss if math.isfinite(val_loss) else dataset_objective(
        params, ds_val, gamma, costs)
    return TrainResult(checkpoint_path=str(ckpt_path), metrics_path=str(metrics_path),
                       iterations_run=iterations_run, final_val_loss=final_val,
                       reached_target=reached, target_iteration=target_iteration)


def _metrics_row(it, train_loss, val_loss, eta, rho_tr, grad_var, max_scale, wall_ms):
    def fmt(x):
        return "" if (isinstance(x, float) and math.isnan(x)) else repr(float(x))

    return (f"{it},{fmt(train_loss)},{fmt(val_loss)},{fmt(eta)},{fmt(rho_tr)},"
            f"{fmt(grad_var)},{fmt(max_scale)},{wall_ms:.3f}\n")


# ---------------------------------------------------------------------------
# evaluation


def load_policy(cfg: ExperimentConfig, checkpoint_path) -> pol.PolicyParams:
    records, cfg_hash, kind, _ = ckpt.load_records(checkpoint_path)
    if cfg_hash != cfg.identity_hash():
        raise ckpt.CheckpointError("checkpoint does not match this config")
    params = pol.init_params(cfg.policy, rs.stream(cfg.seed, rs.POLICY_INIT))
    for name in params.values:
        params.values[name] = records[name].copy()
    return params


QUANTS = (0.05, 0.25, 0.5, 0.75, 0.95)


def evaluate(cfg: ExperimentConfig, params: pol.PolicyParams,
             ds_test: Dataset) -> dict:
    """Hedge analysis on a held-out set.

    Besides the full policy, reports the unhedged book and a delta-only
    variant where every option action is zeroed at evaluation time, so
    the option contribution to risk reduction is isolated.
    """
    res = pol.rollout(params, ds_test.features, ds_test.mask, record=False)
    actions = res.actions
    c_lin = cfg.costs.linear(cfg.grid.d)
    pnl, cost = ct.hedged_pnl(actions, ds_test.returns, ds_test.payoff, c_lin)
    delta_only = actions.copy()
    delta_only[:, :, 1:] = 0.0
    pnl_delta, cost_delta = ct.hedged_pnl(delta_only, ds_test.returns,
                                          ds_test.payoff, c_lin)
    unhedged = -ds_test.payoff

    def stats(x, costs_vec=None):
        out = {"mean": float(x.mean()), "std": float(x.std(ddof=1)),
               "skewness": _skewness(x)}
        if costs_vec is not None:
            out["mean_cost"] = float(costs_vec.mean())
        return out

    quantiles = np.quantile(actions, QUANTS, axis=0)  # (5, T, d)
    report = {
        "identity_hash": cfg.identity_hash(),
        "n_paths": int(ds_test.n_paths),
        "pnl": {
            "hedged": stats(pnl, cost),
            "delta_only": stats(pnl_delta, cost_delta),
            "unhedged": stats(unhedged),
        },
        "validation_estimator_loss": float(
            cfg.risk_aversion * pnl.var(ddof=1) + cost.mean()),
        "action_quantiles": {
            "levels": list(QUANTS),
            "values": quantiles.tolist(),  # (levels, T, d)
        },
    }
    per_path = np.column_stack([pnl + ds_test.payoff, ds_test.payoff, pnl, cost,
                                pnl_delta, cost_delta])
    return {"report": report, "per_path": per_path}


def _skewness(x: np.ndarray) -> float:
    m = x.mean()
    s = x.std(ddof=1)
    if s == 0.0:
        return 0.0
    return float(((x - m) ** 3).mean() / s ** 3)


PER_PATH_HEADER = "path,gains,payoff,pnl,cost,pnl_delta_only,cost_delta_only"


def write_evaluation(outdir, result: dict) -> tuple[str, str]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = outdir / "evaluation.json"
    summary.write_text(json.dumps(result["report"], indent=2, sort_keys=True))
    dump = outdir / "evaluation_paths.csv"
    with open(dump, "w") as fh:
        fh.write(PER_PATH_HEADER + "\n")
        for i, row in enumerate(result["per_path"]):
            fh.write(str(i) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return str(summary), str(dump)


# ---------------------------------------------------------------------------
# plot-ready exports


def export_loss_curves(metrics_csv, outdir) -> str:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / "loss_curves.csv"
    lines = Path(metrics_csv).read_text().strip().splitlines()
    with open(out, "w") as fh:
        fh.write("iteration,train_loss,val_loss\n")
        for line in lines[1:]:
            parts = line.split(",")
            fh.write(f"{parts[0]},{parts[1]},{parts[2]}\n")
    return str(out)


def export_pnl_histogram(per_path_csv, outdir, bins: int = 60) -> str:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / "pnl_histogram.csv"
    rows = Path(per_path_csv).read_text().strip().splitlines()
    header = "kind,bin_left,bin_right,count\n"
    if len(rows) <= 1:
        out.write_text(header)
        return str(out)
    data = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    pnl, pnl_delta = data[:, 2], data[:, 4]
    unhedged = -data[:, 1]
    lo = min(pnl.min(), pnl_delta.min(), unhedged.min())
    hi = max(pnl.max(), pnl_delta.max(), unhedged.max())
    edges = np.linspace(lo, hi, bins + 1)
    with open(out, "w") as fh:
        fh.write(header)
        for kind, series in (("hedged", pnl), ("delta_only", pnl_delta),
                             ("unhedged", unhedged)):
            counts, _ = np.histogram(series, bins=edges)
            for b in range(bins):
                fh.write(f"{kind},{edges[b]!r},{edges[b + 1]!r},{counts[b]}\n")
    return str(out)


def export_hedge_fans(eval_summary_json, outdir) -> str:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / "hedge_fans.csv"
    report = json.loads(Path(eval_summary_json).read_text())
    levels = report["action_quantiles"]["levels"]
    values = np.array(report["action_quantiles"]["values"])  # (levels, T, d)
    with open(out, "w") as fh:
        fh.write("t,instrument," + ",".join(f"q{int(100 * q):02d}" for q in levels) + "\n")
        _, n_steps, d = values.shape
        for t in range(n_steps):
            for i in range(d):
                qs = ",".join(repr(float(values[k, t, i])) for k in range(len(levels)))
                fh.write(f"{t},{i},{qs}\n")
    return str(out)
