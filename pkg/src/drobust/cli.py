"""Command-line harness: simulate data, evaluate and learn policies, run sweeps.

Every command that writes a results table uses the long format: one row
per ``(method, delta, n, seed)`` run. Oracle truths are cached in a
sidecar JSON file keyed by a hash of the environment, policy, radius and
Monte Carlo settings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .cdrople import LearnConfig, cdr2opl
from .core import Dataset, read_dataset_csv, write_dataset_csv
from .errors import ConfigurationError, DrobustError, OptimizationFailure
from .ldrope import LdropeConfig, ldr2ope
from .nuisance import NuisanceSpec, fit_propensity
from .policy import Policy, policy_from_json, uniform_policy
from .simulator import (Softmax5Env, env_from_json, make_env, oracle_regret, oracle_value,
                        sample_dataset, target_policy)
from .weighted import (Regime, degeneracy_classify, ips_weighted_sample, weighted_dro_value)

EVAL_METHODS = ("snips", "ips", "ldr2ope")
LEARN_METHODS = ("cdr2opl", "snips-max")
RESULT_COLUMNS = ("method", "delta", "n", "seed", "estimate", "truth", "sq_err", "status", "wall_ms")
DEFAULT_CLIP = 1e-3


# ---------------------------------------------------------------------------
# Results tables
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(rows: Sequence[dict], path, columns: Sequence[str] = RESULT_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


_INT_COLUMNS = {"n", "seed", "wall_ms"}
_STR_COLUMNS = {"method", "status", "flags", "policy"}


def read_results_csv(path) -> List[dict]:
    """Read a table written by :func:`write_results_csv` back into typed rows."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k in _STR_COLUMNS:
                    row[k] = v
                elif k in _INT_COLUMNS:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            out.append(row)
    return out


def _sort_key(row: dict):
    return (row["method"], row["delta"], row["n"], row["seed"])


# ---------------------------------------------------------------------------
# Oracle cache
# ---------------------------------------------------------------------------


def _hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


class OracleCache:
    """Oracle values keyed by a content hash; persisted to a JSON file when a path is set."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict = {}
        if self.path is not None and self.path.exists():
            self.entries = json.loads(self.path.read_text())

    def value(self, env, policy: Policy, delta: float, mc_samples: int, seed: int = 0):
        key = _hash({"env": env.to_json(), "policy": policy.to_json(), "delta": delta,
                     "mc_samples": mc_samples, "seed": seed})
        if key not in self.entries:
            ov = oracle_value(env, policy, delta, mc_samples=mc_samples, seed=seed)
            self.entries[key] = {"value": ov.value, "standard_error": ov.standard_error, "alpha": ov.alpha}
        return self.entries[key]

    def save(self) -> None:
        if self.path is not None:
            self.path.write_text(json.dumps(self.entries, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# Shared resolution helpers
# ---------------------------------------------------------------------------


def resolve_env(name: Optional[str] = None, env_json: Optional[str] = None):
    if env_json is not None:
        return env_from_json(json.loads(Path(env_json).read_text()))
    if name is None:
        return None
    return make_env(name)


def resolve_policy(spec: str, env, temperature: float = 1.0, action_count: Optional[int] = None,
                   state_dim: Optional[int] = None) -> Policy:
    """``target``, ``behavior``, ``uniform`` or a path to a policy JSON file."""
    if spec == "target":
        if env is None:
            raise ConfigurationError("the target policy needs --env")
        return target_policy(env, temperature)
    if spec == "behavior":
        if env is None:
            raise ConfigurationError("the behavior policy needs --env")
        return env.behavior_policy()
    if spec == "uniform":
        if env is not None:
            A = env.action_count
            d = env.state_dim if isinstance(env, Softmax5Env) else 1
        else:
            A, d = action_count, state_dim
        if A is None or d is None:
            raise ConfigurationError("uniform policy needs action and state dimensions")
        return uniform_policy(A, d)
    path = Path(spec)
    if not path.exists():
        raise ConfigurationError(f"unknown policy {spec!r}")
    return policy_from_json(json.loads(path.read_text()))


def _nuisance(known_propensity: bool, propensity_model: str, outcome: str, clip_floor: float) -> NuisanceSpec:
    return NuisanceSpec(propensity="logged" if known_propensity else propensity_model, outcome=outcome,
                        continuum=outcome if outcome in ("knn", "kernel", "tree-ensemble") else "kernel",
                        clip_floor=clip_floor)


def _behavior_props(data: Dataset, nuis: NuisanceSpec, seed: int) -> np.ndarray:
    rows = np.arange(len(data))
    if nuis.propensity == "logged":
        if data.propensities is None:
            raise ConfigurationError("--known-propensity needs a propensity column in the data")
        return np.clip(data.propensities, nuis.clip_floor, 1.0)
    model = fit_propensity(data, nuis.propensity, seed, clip_floor=nuis.clip_floor)
    return model.prob_rows(data, rows)


def estimate(method: str, data: Dataset, policy: Policy, delta: float, *, folds: int = 5, seed: int = 0,
             nuisance: Optional[NuisanceSpec] = None):
    """Run one evaluation method; returns ``(estimate, status, flags)``."""
    nuis = nuisance if nuisance is not None else NuisanceSpec(clip_floor=DEFAULT_CLIP)
    if method in ("ips", "snips"):
        den = _behavior_props(data, nuis, seed)
        ws = ips_weighted_sample(data, policy, den, self_normalize=(method == "snips"))
        res = weighted_dro_value(ws, delta)
        return res.value, str(res.status), list(res.flags)
    if method == "ldr2ope":
        res = ldr2ope(data, policy, LdropeConfig(delta=delta, folds=folds, seed=seed, nuisance=nuis))
        return res.value, str(Regime.FINITE), list(res.flags)
    raise ConfigurationError(f"unknown evaluation method {method!r}")


def _truth(cache: Optional[OracleCache], env, policy, delta, mc_samples) -> float:
    if cache is None or env is None:
        return math.nan
    return float(cache.value(env, policy, delta, mc_samples)["value"])


def _row(method, delta, n, seed, est, truth, status, wall_ms, flags=None) -> dict:
    sq = (est - truth) ** 2 if np.isfinite(est) and np.isfinite(truth) else math.nan
    row = {"method": method, "delta": float(delta), "n": int(n), "seed": int(seed), "estimate": float(est),
           "truth": float(truth), "sq_err": float(sq), "status": status, "wall_ms": int(wall_ms)}
    if flags is not None:
        row["flags"] = ";".join(flags)
    return row


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Cartesian sweep over methods, radii, sample sizes and seeds."""

    env: str = "softmax5"
    methods: List[str] = field(default_factory=lambda: ["snips", "ldr2ope"])
    deltas: List[float] = field(default_factory=lambda: [0.1])
    n_grid: List[int] = field(default_factory=lambda: [1024])
    seeds: List[int] = field(default_factory=lambda: [0])
    folds: int = 5
    policy: str = "target"
    temperature: float = 1.0
    known_propensity: bool = True
    propensity_model: str = "logistic"
    outcome: str = "kernel"
    clip_floor: float = DEFAULT_CLIP
    oracle_mc_samples: int = 2**14
    output: Optional[str] = None
    learn: dict = field(default_factory=dict)

    def __post_init__(self):
        if list(self.n_grid) != sorted(self.n_grid):
            raise ConfigurationError("n_grid must be sorted ascending")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        for m in self.methods:
            if m not in EVAL_METHODS + LEARN_METHODS:
                raise ConfigurationError(f"unknown method {m!r}")
        if any(not d > 0 for d in self.deltas):
            raise ConfigurationError("deltas must be positive")

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    def nuisance(self) -> NuisanceSpec:
        return _nuisance(self.known_propensity, self.propensity_model, self.outcome, self.clip_floor)


def _learn_config(cfg: ExperimentConfig, method: str, delta: float, seed: int) -> LearnConfig:
    kw = dict(cfg.learn)
    return LearnConfig(delta=delta, folds=cfg.folds, seed=seed, objective=method, nuisance=cfg.nuisance(), **kw)


def _sweep_seed(cfg: ExperimentConfig, seed: int, timing: bool) -> List[dict]:
    """All rows for one seed (the unit of parallel work)."""
    env = make_env(cfg.env)
    rows = []
    for n in cfg.n_grid:
        data = sample_dataset(env, n, seed, log_propensity=True)
        for method in cfg.methods:
            for delta in cfg.deltas:
                t0 = time.perf_counter()
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        if method in EVAL_METHODS:
                            policy = resolve_policy(cfg.policy, env, cfg.temperature)
                            est, status, _ = estimate(method, data, policy, delta, folds=cfg.folds, seed=seed,
                                                      nuisance=cfg.nuisance())
                            rows.append(_row(method, delta, n, seed, est, math.nan, status, 0))
                        else:
                            res = cdr2opl(data, _learn_config(cfg, method, delta, seed))
                            rows.append(_row(method, delta, n, seed, res.objective, math.nan, "Finite", 0))
                            rows[-1]["_policy"] = res.policy.to_json()
                except DrobustError as exc:
                    rows.append(_row(method, delta, n, seed, math.nan, math.nan, f"error:{type(exc).__name__}", 0))
                if timing:
                    rows[-1]["wall_ms"] = int(round(1000 * (time.perf_counter() - t0)))
    return rows


def _jobs(flag: Optional[int]) -> int:
    env = os.environ.get("DROBUST_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigurationError("DROBUST_JOBS must be an integer") from exc
    return max(1, flag or 1)


def run_sweep(cfg: ExperimentConfig, *, jobs: int = 1, timing: bool = False,
              cache: Optional[OracleCache] = None) -> List[dict]:
    """Run every cell of the sweep and attach oracle truths; rows come back sorted."""
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_sweep_seed, [cfg] * len(cfg.seeds), cfg.seeds, [timing] * len(cfg.seeds)))
    else:
        parts = [_sweep_seed(cfg, s, timing) for s in cfg.seeds]
    rows = [r for part in parts for r in part]
    env = make_env(cfg.env)
    cache = cache if cache is not None else OracleCache()
    for row in rows:
        pol_doc = row.pop("_policy", None)
        if row["status"].startswith("error"):
            continue
        policy = policy_from_json(pol_doc) if pol_doc is not None else resolve_policy(cfg.policy, env, cfg.temperature)
        truth = _truth(cache, env, policy, row["delta"], cfg.oracle_mc_samples)
        row["truth"] = truth
        est = row["estimate"]
        row["sq_err"] = (est - truth) ** 2 if np.isfinite(est) and np.isfinite(truth) else math.nan
    rows.sort(key=_sort_key)
    return rows


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    env = resolve_env(args.env, args.env_json)
    data = sample_dataset(env, args.n, args.seed, log_propensity=args.log_propensity)
    write_dataset_csv(data, args.out)
    cols = data.state_dim + 2 + (1 if data.propensities is not None else 0)
    print(f"wrote {len(data)} rows, {cols} columns to {args.out}")
    print("env: " + json.dumps(env.to_json(), sort_keys=True))
    return 0


def _load_data(path, env) -> Dataset:
    return read_dataset_csv(path, env.action_count if env is not None else None)


def _cache_for(args, out: Optional[str]) -> Optional[OracleCache]:
    if args.no_oracle:
        return None
    if args.oracle_cache:
        return OracleCache(Path(args.oracle_cache))
    if out:
        return OracleCache(Path(str(out) + ".oracle.json"))
    return OracleCache()


def cmd_evaluate(args) -> int:
    env = resolve_env(args.env, args.env_json)
    data = _load_data(args.data, env)
    policy = resolve_policy(args.policy, env, args.temperature, data.action_count, data.state_dim)
    nuis = _nuisance(args.known_propensity, args.propensity_model, args.outcome, args.clip_floor)
    cache = _cache_for(args, args.out)
    rows = []
    for method in args.method:
        for delta in args.delta:
            t0 = time.perf_counter()
            est, status, flags = estimate(method, data, policy, delta, folds=args.folds, seed=args.seed,
                                          nuisance=nuis)
            wall = int(round(1000 * (time.perf_counter() - t0))) if args.timing else 0
            truth = _truth(cache, env, policy, delta, args.mc_samples)
            rows.append(_row(method, delta, len(data), args.seed, est, truth, status, wall, flags))
    rows.sort(key=_sort_key)
    cols = RESULT_COLUMNS + ("flags",)
    if args.out:
        write_results_csv(rows, args.out, cols)
    else:
        write_results_csv(rows, "/dev/stdout", cols)
    if cache is not None:
        cache.save()
    return 0


LEARN_COLUMNS = ("method", "delta", "n", "seed", "objective", "oracle_value", "oracle_se", "regret",
                 "regret_se", "status", "wall_ms")


def cmd_learn(args) -> int:
    env = resolve_env(args.env, args.env_json)
    data = _load_data(args.data, env)
    nuis = _nuisance(args.known_propensity, args.propensity_model, args.outcome, args.clip_floor)
    methods = list(LEARN_METHODS) if args.compare else [args.method]
    rows = []
    for method in methods:
        cfg = LearnConfig(delta=args.delta, folds=args.folds, policy_kind=args.policy_kind, restarts=args.restarts,
                          learning_rate=args.lr, inner_steps=args.inner_steps, max_outer_iters=args.max_outer_iters,
                          seed=args.seed, objective=method, nuisance=nuis)
        t0 = time.perf_counter()
        try:
            res = cdr2opl(data, cfg)
        except OptimizationFailure as exc:
            trace_path = Path(str(args.out_policy or "policy.json") + f".{method}.traces.json")
            trace_path.write_text(json.dumps({"error": str(exc), "traces": exc.traces}, indent=1))
            print(f"optimization failed; traces written to {trace_path}", file=sys.stderr)
            raise
        wall = int(round(1000 * (time.perf_counter() - t0))) if args.timing else 0
        doc = res.to_json()
        out_policy = args.out_policy
        if out_policy and len(methods) > 1:
            p = Path(out_policy)
            out_policy = str(p.with_name(f"{p.stem}.{method}{p.suffix}"))
        if out_policy:
            Path(out_policy).write_text(json.dumps(doc, indent=1, sort_keys=True))
        ov = se = reg = reg_se = math.nan
        if env is not None and not args.no_oracle:
            v = oracle_value(env, res.policy, args.delta, mc_samples=args.mc_samples)
            ov, se = v.value, v.standard_error
            if isinstance(env, Softmax5Env):
                r = oracle_regret(env, res.policy, args.delta, mc_samples=args.mc_samples, kind=args.policy_kind)
                reg, reg_se = r.value, r.standard_error
        rows.append({"method": method, "delta": float(args.delta), "n": len(data), "seed": args.seed,
                     "objective": float(res.objective), "oracle_value": float(ov), "oracle_se": float(se),
                     "regret": float(reg), "regret_se": float(reg_se), "status": "ok", "wall_ms": wall})
    write_results_csv(rows, args.out or "/dev/stdout", LEARN_COLUMNS)
    return 0


def degeneracy_report(data: Dataset, policy: Policy, delta: float, behavior=None) -> List[dict]:
    """Thresholds and regime for IPS and SNIPS weightings."""
    out = []
    for name, sn in (("ips", False), ("snips", True)):
        ws = ips_weighted_sample(data, policy, behavior, self_normalize=sn)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st, regime = degeneracy_classify(ws, delta)
        out.append({"weighting": name, "S_w": st.s_w, "S_w_m": st.s_w_min, "min_reward": st.min_reward,
                    "threshold_infinite": st.infinite_threshold, "threshold_zero": st.zero_threshold,
                    "delta": delta, "regime": str(regime)})
    return out


def cmd_degeneracy(args) -> int:
    env = resolve_env(args.env, args.env_json)
    data = _load_data(args.data, env)
    policy = resolve_policy(args.policy, env, args.temperature, data.action_count, data.state_dim)
    behavior = None
    if not args.known_propensity:
        behavior = fit_propensity(data, args.propensity_model, args.seed, clip_floor=args.clip_floor)
    for delta in args.delta:
        for rep in degeneracy_report(data, policy, delta, behavior):
            if args.json:
                print(json.dumps(rep, sort_keys=True))
            else:
                print(f"[{rep['weighting']}] delta={delta!r} S_w={rep['S_w']!r} S_w^m={rep['S_w_m']!r} "
                      f"-log S_w={rep['threshold_infinite']!r} -log S_w^m={rep['threshold_zero']!r} "
                      f"regime={rep['regime']}")
    return 0


def cmd_oracle(args) -> int:
    env = resolve_env(args.env, args.env_json)
    policy = resolve_policy(args.policy, env, args.temperature)
    cache = OracleCache(Path(args.oracle_cache)) if args.oracle_cache else OracleCache()
    for delta in args.delta:
        v = cache.value(env, policy, delta, args.mc_samples, args.seed)
        line = {"delta": delta, "value": v["value"], "standard_error": v["standard_error"], "alpha": v["alpha"]}
        if args.regret:
            r = oracle_regret(env, policy, delta, mc_samples=args.mc_samples, seed=args.seed)
            line.update(regret=r.value, regret_se=r.standard_error)
        print(json.dumps(line, sort_keys=True))
    cache.save()
    return 0


def cmd_sweep(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    cfg = ExperimentConfig.from_json(doc)
    out = args.out or cfg.output
    if not out:
        raise ConfigurationError("no output path given (use --out or the config's output key)")
    cache = OracleCache(Path(args.oracle_cache) if args.oracle_cache else Path(str(out) + ".oracle.json"))
    rows = run_sweep(cfg, jobs=_jobs(args.jobs), timing=args.timing, cache=cache)
    write_results_csv(rows, out)
    cache.save()
    print(f"wrote {len(rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_env(p):
    p.add_argument("--env", help="softmax5, softmax5-symmetric or discrete-default")
    p.add_argument("--env-json", help="environment JSON file (overrides --env)")


def _add_nuisance(p):
    p.add_argument("--known-propensity", action="store_true", help="use the logged propensity column")
    p.add_argument("--propensity-model", default="logistic", choices=["logistic", "knn"])
    p.add_argument("--outcome", default="kernel", choices=["knn", "kernel", "tree-ensemble", "zero"])
    p.add_argument("--clip-floor", type=float, default=DEFAULT_CLIP)
    p.add_argument("--folds", type=int, default=5)


def _add_oracle(p):
    p.add_argument("--mc-samples", type=int, default=2**14)
    p.add_argument("--oracle-cache", help="sidecar JSON for cached oracle values")
    p.add_argument("--no-oracle", action="store_true", help="skip ground-truth columns")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="drobust", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a logged dataset")
    _add_env(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-propensity", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="robust value estimates for a policy")
    _add_env(p)
    p.add_argument("--data", required=True)
    p.add_argument("--policy", default="target", help="target, behavior, uniform or a policy JSON path")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--method", nargs="+", default=["snips", "ldr2ope"], choices=EVAL_METHODS)
    p.add_argument("--delta", nargs="+", type=float, default=[0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true", help="record wall time (otherwise 0)")
    p.add_argument("--out")
    _add_nuisance(p)
    _add_oracle(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("learn", help="learn a robust policy")
    _add_env(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="cdr2opl", choices=LEARN_METHODS)
    p.add_argument("--compare", action="store_true", help="run both learners and emit one row each")
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--policy-kind", default="linear-softmax", choices=["linear-softmax", "mlp-softmax"])
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--inner-steps", type=int, default=10)
    p.add_argument("--max-outer-iters", type=int, default=LearnConfig.max_outer_iters)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--out-policy")
    p.add_argument("--out")
    _add_nuisance(p)
    _add_oracle(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("degeneracy", help="IPS/SNIPS degeneracy thresholds and regimes")
    _add_env(p)
    p.add_argument("--data", required=True)
    p.add_argument("--policy", default="target")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--delta", nargs="+", type=float, default=[0.1])
    p.add_argument("--known-propensity", action="store_true")
    p.add_argument("--propensity-model", default="logistic", choices=["logistic", "knn"])
    p.add_argument("--clip-floor", type=float, default=DEFAULT_CLIP)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_degeneracy)

    p = sub.add_parser("oracle", help="ground-truth worst-case value (and regret)")
    _add_env(p)
    p.add_argument("--policy", default="target")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--delta", nargs="+", type=float, default=[0.1])
    p.add_argument("--mc-samples", type=int, default=2**14)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regret", action="store_true")
    p.add_argument("--oracle-cache")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="cartesian experiment sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (DROBUST_JOBS overrides)")
    p.add_argument("--timing", action="store_true")
    p.add_argument("--oracle-cache")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "env", None) is None and getattr(args, "env_json", None) is None \
            and args.command in ("simulate", "oracle"):
        print("drobust: --env or --env-json is required", file=sys.stderr)
        return 2
    try:
        return int(args.func(args))
    except DrobustError as exc:
        print(f"drobust: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"drobust: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
