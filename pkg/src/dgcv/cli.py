"""Command-line front end.

Subcommands: tune, fit, predict, simulate, diagnose, profile-m, bench.
Failures print one line ``error[<tag>]: <message>`` on stderr and exit with
2 (validation), 3 (no selectable grid point) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .block_krr import DENSE_CAP, fit_state, predict_averaged
from .config import ExperimentConfig, load_config
from .datasets import (
    Dataset,
    WeightScheme,
    load_dataset,
    make_weights,
    random_partition,
    read_table,
    save_csv,
    simulate_beta_mixture,
    simulate_song_surrogate,
    simulate_wendland_field,
)
from .diagnostics import condition_row, q_statistics, resample_conditions, theorem1_gap
from .errors import DgcvError, IngestionError, InvalidArgumentError, NoSelectionError, ResourceLimitError
from .kernels import KernelSpec, gram
from .newton import NewtonOptions, newton_optimize
from .tuning import dgcv_score, profile_m, state_scores, tune_grid, tune_ngcv

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_NO_SELECTION = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# data


def simulate(model: str, n: int, sigma: float, seed, p: int = 1, rho: float = 0.0, latent_dim: int = 4) -> Dataset:
    if model == "beta":
        return simulate_beta_mixture(n, sigma, seed)
    if model == "wendland":
        return simulate_wendland_field(n, p, rho, sigma, seed)
    if model == "song":
        return simulate_song_surrogate(n, p, latent_dim, sigma, seed)
    raise InvalidArgumentError(f"unknown simulator {model!r}")


def _standardize(train: Dataset, test: Dataset | None):
    mu, sd = train.X.mean(axis=0), train.X.std(axis=0)
    if np.any(sd == 0):
        raise IngestionError("cannot standardize a constant covariate column")

    def apply(ds):
        return Dataset((ds.X - mu) / sd, ds.y, ds.f0, ds.sigma, ds.columns)

    return apply(train), (apply(test) if test is not None else None), (mu, sd)


def load_data(cfg: ExperimentConfig, replicate: int = 0):
    """``(train, test or None, (mean, sd) or None)`` for one replicate."""
    src = cfg.data
    if src.simulated:
        full = simulate(src.model, src.n + src.test_n, src.sigma, src.seed + replicate, src.p, src.rho,
                        src.latent_dim)
        train = full.subset(np.arange(src.n))
        test = full.subset(np.arange(src.n, src.n + src.test_n)) if src.test_n else None
        return train, test, None
    train = load_dataset(src.csv, src.response)
    test = load_dataset(src.test_csv, src.response) if src.test_csv else None
    if test is not None and test.p != train.p:
        raise IngestionError(f"{src.test_csv}: has {test.p} covariates, training data has {train.p}")
    stats = None
    if src.standardize:
        train, test, stats = _standardize(train, test)
    return train, test, stats


def _weights(cfg, partition):
    scheme = WeightScheme(cfg.weights, cfg.m_star)
    return make_weights(scheme, partition)


def _pmse(fits, test: Dataset) -> float:
    r = predict_averaged(fits, test.X) - test.y
    return float(r @ r) / test.N


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(x):
    return float(x) if math.isfinite(x) else None


def _theta_dict(spec: KernelSpec):
    return dict(zip(spec.param_names, map(float, spec.theta)))


def _outdir(args, cfg):
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# tune


def _tune_grid_once(cfg, ds, test, replicate, threads):
    part = random_partition(ds.N, cfg.m, cfg.seed + replicate)
    w = _weights(cfg, part)
    kinds = cfg.score_kinds()
    grid_kinds = [k for k in kinds if k.name != "ngcv"]
    lams = cfg.lambdas(ds.N)
    selection = {}
    report = None
    if grid_kinds:
        report = tune_grid(ds, part, cfg.kernels, lams, grid_kinds, w, threads=threads)
        for kind in grid_kinds:
            lam, spec, score = report.best(kind)
            entry = {"lambda": lam, "theta": _theta_dict(spec), "score": score,
                     "index": int(report.argmin[kind.label])}
            if test is not None:
                st = fit_state(ds, part, spec, lam, w, eval_index=np.arange(0), threads=threads)
                entry["test_pmse"] = _pmse(st.fits, test)
            selection[kind.label] = entry
    if any(k.name == "ngcv" for k in kinds):
        if cfg.weights != "uniform":
            raise InvalidArgumentError("ngcv is defined for uniform weights only")
        if len(cfg.kernels) != 1:
            raise InvalidArgumentError("ngcv tunes lambda only; give a single kernel")
        res = tune_ngcv(ds, part, cfg.kernels[0], lams, threads=threads)
        entry = {"block_lambdas": res.lams, "mean_lambda": float(res.lams.mean())}
        if ds.f0 is not None:
            entry["true_loss"] = res.true_loss(ds)
        if test is not None:
            entry["test_pmse"] = _pmse(res.fits, test)
        selection["ngcv"] = entry
    return report, selection


def cmd_tune(args) -> int:
    cfg = load_config(args.config)
    threads = args.threads or cfg.threads
    optimizer = args.optimizer or cfg.optimizer
    out = _outdir(args, cfg)
    many = cfg.replicates > 1

    if optimizer == "newton":
        return _tune_newton(cfg, out, threads)

    sweep_rows, timing_rows, selections = [], [], []
    header = None
    for r in range(cfg.replicates):
        ds, test, _ = load_data(cfg, r)
        report, sel = _tune_grid_once(cfg, ds, test, r, threads)
        selections.append(sel)
        if report is None:
            continue
        names = list(report.specs[0].param_names)
        header = (["replicate"] if many else []) + ["lambda", *names, "kind", "score", "trace_stat"]
        prefix = [r] if many else []
        sweep_rows.extend(prefix + list(row) for row in report.rows())
        for lam, spec, ms in zip(report.lams, report.specs, report.wall_ms):
            timing_rows.append(prefix + [float(lam), *map(float, spec.theta), float(ms)])
    if header is not None:
        write_csv(out / "sweep.csv", header, sweep_rows)
        theta_names = header[1 + many: -3]
        write_csv(out / "timing.csv", (["replicate"] if many else []) + ["lambda", *theta_names, "wall_ms"],
                  timing_rows)
    write_json(out / "selection.json", selections if many else selections[0])
    for label, entry in (selections[-1]).items():
        if "lambda" in entry:
            print(f"{label}: lambda={entry['lambda']:.6g} theta={entry['theta']} score={entry['score']:.6g}")
        else:
            print(f"{label}: mean block lambda={entry['mean_lambda']:.6g}")
    return EXIT_OK


def _tune_newton(cfg, out, threads):
    if cfg.replicates > 1:
        raise InvalidArgumentError("the newton optimizer runs a single replicate")
    ds, test, _ = load_data(cfg)
    part = random_partition(ds.N, cfg.m, cfg.seed)
    w = _weights(cfg, part)
    spec = cfg.kernels[0]
    init_eta, init_theta = cfg.init_eta, cfg.init_theta
    if init_eta is None:
        # start from the dGCV grid minimizer
        report = tune_grid(ds, part, cfg.kernels, cfg.lambdas(ds.N), ["dgcv"], w, threads=threads)
        lam0, spec, _ = report.best("dgcv")
        init_eta = math.log(lam0)
        init_theta = init_theta or tuple(spec.theta)
    res = newton_optimize(ds, part, spec, init_eta, init_theta, NewtonOptions(), w, threads)
    names = list(spec.param_names) if spec.differentiable else []
    rows = [[h["iter"], h["eta"], *[h[n] for n in names], h["score"], h["grad_norm"], h["step"]]
            for h in res.history]
    write_csv(out / "newton_trace.csv", ["iter", "eta", *names, "score", "grad_norm", "step"], rows)
    final = spec.with_theta(res.theta_hat) if spec.differentiable else spec
    entry = {"lambda": res.lam_hat, "eta": res.eta_hat, "theta": _theta_dict(final), "score": res.score,
             "grad_norm": res.grad_norm, "iterations": res.iterations, "status": res.status}
    if test is not None:
        st = fit_state(ds, part, final, res.lam_hat, w, eval_index=np.arange(0), threads=threads)
        entry["test_pmse"] = _pmse(st.fits, test)
    write_json(out / "selection.json", {"dgcv_newton": entry})
    print(f"newton: {res.status} after {res.iterations} iterations, lambda={res.lam_hat:.6g} "
          f"theta={entry['theta']} score={res.score:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit / predict


def _pick_spec(cfg, theta):
    if theta is None:
        if len(cfg.kernels) != 1:
            raise InvalidArgumentError("the kernel block holds a grid; pass --theta to pick one value")
        return cfg.kernels[0]
    return cfg.kernels[0].with_theta([float(t) for t in theta.split(",")])


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    threads = args.threads or cfg.threads
    out = _outdir(args, cfg)
    ds, test, stats = load_data(cfg)
    lam = args.lam
    if lam is None:
        grid = cfg.lambdas(ds.N)
        if grid.size != 1:
            raise InvalidArgumentError("the lambda block holds a grid; pass --lambda")
        lam = float(grid[0])
    if not lam > 0:
        raise InvalidArgumentError("--lambda must be > 0")
    spec = _pick_spec(cfg, args.theta)
    part = random_partition(ds.N, cfg.m, cfg.seed)
    w = _weights(cfg, part)
    st = fit_state(ds, part, spec, lam, w, threads=threads)
    kinds = [k for k in cfg.score_kinds() if k.name != "ngcv"]
    scores = {k: _finite(v) for k, v in state_scores(st, ds, kinds).items()}
    summary = {"lambda": lam, "theta": _theta_dict(spec), "m": cfg.m, "scores": scores,
               "trace_stat": st.trace_stat}
    if test is not None:
        summary["test_pmse"] = _pmse(st.fits, test)
    arrays = {"spec": np.array(json.dumps(spec.to_dict())), "lam": np.array(lam), "m": np.array(cfg.m),
              "columns": np.array(list(ds.columns) if ds.columns else [f"x{j + 1}" for j in range(ds.p)])}
    if stats is not None:
        arrays["x_mean"], arrays["x_sd"] = stats
    for k, fit in enumerate(st.fits):
        arrays[f"X_{k}"] = fit.X
        arrays[f"beta_{k}"] = fit.beta
    np.savez(out / "model.npz", **arrays)
    write_json(out / "fit.json", summary)
    print(json.dumps(scores))
    return EXIT_OK


class SavedModel:
    """Averaged estimator restored from ``model.npz``."""

    def __init__(self, path):
        try:
            z = np.load(path, allow_pickle=False)
        except OSError as exc:
            raise IngestionError(f"{path}: cannot read model ({exc})") from None
        self.spec = KernelSpec.from_dict(json.loads(str(z["spec"])))
        self.lam = float(z["lam"])
        self.m = int(z["m"])
        self.columns = [str(c) for c in z["columns"]]
        self.x_mean = z["x_mean"] if "x_mean" in z else None
        self.x_sd = z["x_sd"] if "x_sd" in z else None
        self.blocks = [(z[f"X_{k}"], z[f"beta_{k}"]) for k in range(self.m)]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.x_mean is not None:
            X = (X - self.x_mean) / self.x_sd
        acc = np.zeros(X.shape[0])
        for Xk, beta in self.blocks:
            acc += gram(self.spec, X, Xk) @ beta
        return acc / self.m


def cmd_predict(args) -> int:
    model = SavedModel(args.model)
    path = Path(args.data)
    header, data = read_table(path)
    missing = [c for c in model.columns if c not in header]
    if missing:
        raise IngestionError(f"{path}: missing covariate column(s) {missing}")
    X = data[:, [header.index(c) for c in model.columns]]
    yhat = model.predict(X)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.response and args.response in header:
        y = data[:, header.index(args.response)]
        write_csv(out, ["yhat", args.response], zip(yhat, y))
        print(f"pmse={float(np.mean((yhat - y) ** 2)):.6g}")
    else:
        write_csv(out, ["yhat"], ([v] for v in yhat))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / diagnose / profile-m / bench


def cmd_simulate(args) -> int:
    sigma = args.sigma if args.sigma is not None else (1.0 if args.model == "song" else 3.0)
    p = args.p if args.p is not None else (90 if args.model == "song" else 1)
    ds = simulate(args.model, args.n, sigma, args.seed, p, args.rho)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    print(f"wrote {ds.N} rows to {out}")
    return EXIT_OK


def _fresh_covariates(cfg, seed):
    """Covariate generator for the Monte-Carlo variance, or None when the design is unknown."""
    src = cfg.data
    if not src.simulated or src.model == "song":
        return None

    def draw(size):
        return simulate(src.model, size, 0.0, seed, src.p, src.rho).X

    return draw


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    threads = args.threads or cfg.threads
    out = _outdir(args, cfg)
    ds, _, _ = load_data(cfg)
    spec = _pick_spec(cfg, args.theta)
    lams = [float(v) for v in args.lam.split(",")] if args.lam else list(cfg.lambdas(ds.N))
    part = random_partition(ds.N, cfg.m, cfg.seed)
    summary = {"N": ds.N, "m": cfg.m, "kernel": spec.to_dict()}

    if args.resamples:
        rows, summaries = [], []
        for lam in lams:
            rep = resample_conditions(ds, part, spec, lam, args.resamples, args.fraction, cfg.seed, threads)
            rows.extend(rep.rows)
            summaries.append(rep.summary)
        keys = ["replicate", "lambda", "m", "c1_stat", "c1_prime_stat", "c4_stat", "d_lambda", "effective_df"]
        write_csv(out / "diagnostics_resample.csv", keys, ([r[k] for k in keys] for r in rows))
        summary["resampling"] = summaries
        write_json(out / "diagnostics.json", summary)
        print(f"wrote {len(rows)} resampled rows")
        return EXIT_OK

    if ds.N > DENSE_CAP:
        raise ResourceLimitError(f"N = {ds.N} exceeds the dense cap {DENSE_CAP}; pass --resamples B")
    sigma2 = ds.sigma**2 if ds.sigma is not None else None
    fresh = _fresh_covariates(cfg, cfg.seed + 1)
    rows = []
    for lam in lams:
        row = condition_row(ds, part, spec, lam, sigma2)
        if sigma2 is not None and fresh is not None:
            st = fit_state(ds, part, spec, lam, threads=threads)
            row["q_mc"] = q_statistics(st, ds, sigma2, fresh)[2]
        if ds.f0 is not None and ds.sigma is not None:
            gap = theorem1_gap(ds, part, spec, lam, cfg.replicates, cfg.seed)
            row["theorem1_gap"] = gap.median
        rows.append(row)
    keys = list(rows[0])
    write_csv(out / "diagnostics.csv", keys, ([r.get(k, "") for k in keys] for r in rows))
    write_json(out / "diagnostics.json", summary)
    print(f"wrote {len(rows)} diagnostic rows")
    return EXIT_OK


def _m_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidArgumentError(f"--m-list must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise InvalidArgumentError("--m-list needs positive integers")
    return vals


def cmd_profile_m(args) -> int:
    cfg = load_config(args.config)
    threads = args.threads or cfg.threads
    out = _outdir(args, cfg)
    m_list = _m_list(args.m_list)
    many = cfg.replicates > 1
    spec = _pick_spec(cfg, args.theta)
    rows = []
    for r in range(cfg.replicates):
        ds, _, _ = load_data(cfg, r)
        prof = profile_m(ds, m_list, spec, cfg.lambdas(ds.N), seed=cfg.seed + r, threads=threads)
        for p in prof:
            tl = "" if p.true_loss is None else p.true_loss
            rows.append(([r] if many else []) + [p.m, p.lam_hat, p.dgcv_p, p.centered, tl])
    header = (["replicate"] if many else []) + ["m", "lambda_hat", "dgcv_p", "centered", "true_loss"]
    write_csv(out / "profile.csv", header, rows)
    print(f"wrote {len(rows)} profile rows")
    return EXIT_OK


def bench_fit_score(ds, m, spec, lams, seed, threads) -> float:
    """Wall time (ms) to fit every block and score dGCV at each lambda."""
    part = random_partition(ds.N, m, seed)
    t0 = time.perf_counter()
    for lam in lams:
        dgcv_score(fit_state(ds, part, spec, lam, threads=threads), ds)
    return (time.perf_counter() - t0) * 1e3


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    threads = args.threads or cfg.threads
    out = _outdir(args, cfg)
    ds, _, _ = load_data(cfg)
    spec = _pick_spec(cfg, args.theta)
    lams = cfg.lambdas(ds.N)
    rows = []
    for m in _m_list(args.m_list):
        if m > ds.N:
            raise InvalidArgumentError(f"m = {m} exceeds N = {ds.N}")
        ms = bench_fit_score(ds, m, spec, lams, cfg.seed, threads)
        rows.append([m, ms])
        print(f"m={m}: {ms:.1f} ms")
    write_csv(out / "bench.csv", ["m", "wall_ms"], rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dgcv", description="Divide-and-conquer kernel ridge regression tuning.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default from config)")
        p.add_argument("--out", default=None, help="output directory (default from config)")

    p = sub.add_parser("tune", help="grid or Newton tuning; writes sweep.csv and selection.json")
    common(p)
    p.add_argument("--optimizer", choices=["grid", "newton"], default=None)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fit", help="fit at one (lambda, theta); writes model.npz and fit.json")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--theta", default=None, help="comma-separated kernel parameters")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CSV with the model's covariate columns")
    p.add_argument("--response", default="y", help="response column to score against, if present")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="write a synthetic data set (CSV plus .meta.json sidecar)")
    p.add_argument("--model", choices=["beta", "wendland", "song"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="condition statistics at given lambdas")
    common(p)
    p.add_argument("--lambda", dest="lam", default=None, help="comma-separated lambdas (default: config grid)")
    p.add_argument("--theta", default=None)
    p.add_argument("--resamples", type=int, default=0, help="B subsamples instead of the full data")
    p.add_argument("--fraction", type=float, default=0.5, help="subsample fraction")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("profile-m", help="profiled dGCV over block counts")
    common(p)
    p.add_argument("--m-list", required=True)
    p.add_argument("--theta", default=None)
    p.set_defaults(func=cmd_profile_m)

    p = sub.add_parser("bench", help="fit+score wall time per block count")
    common(p)
    p.add_argument("--m-list", required=True)
    p.add_argument("--theta", default=None)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error[invalid-argument]: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except DgcvError as exc:
        if isinstance(exc, NoSelectionError):
            code = EXIT_NO_SELECTION
        elif isinstance(exc, (InvalidArgumentError, IngestionError)):
            code = EXIT_INVALID
        else:
            code = EXIT_ERROR
        print(f"error[{exc.tag}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error[io]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_ERROR

if __name__ == "__main__":
    sys.exit(main())
