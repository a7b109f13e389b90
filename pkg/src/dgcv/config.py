"""YAML experiment configuration.

A config names one data source, a kernel (scalar parameters or grids), a
lambda grid, the block count and the scores to report::

    data:
      simulate: {model: beta, n: 1024, sigma: 3, seed: 1}
    kernel: {family: sobolev_periodic, nu: 2}
    lambda: {log_min: -20, log_max: -10, count: 30}
    m: 16
    scores: [dgcv, true_loss]

Unknown keys are rejected so that typos do not silently fall back to
defaults.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import InvalidArgumentError
from .kernels import KernelSpec
from .tuning import ScoreKind

__all__ = ["DataSource", "ExperimentConfig", "parse_config", "load_config", "SIMULATORS"]

SIMULATORS = ("beta", "wendland", "song")

_TOP_KEYS = {"data", "kernel", "lambda", "m", "m_star", "weights", "scores", "optimizer", "init_eta",
             "init_theta", "seed", "threads", "replicates", "output"}
_DATA_KEYS = {"csv", "response", "standardize", "test_csv", "simulate"}
_SIM_KEYS = {"model", "n", "sigma", "seed", "p", "rho", "latent_dim", "test_n"}
_LAMBDA_FORMS = (
    ("log10_min", "log10_max", "count"),
    ("log_min", "log_max", "count"),
    ("values",),
    ("values_over_n",),
)
_PARAM_NAMES = {
    "gaussian": "phi",
    "gaussian_sq": "phi",
    "polynomial": "degree",
    "sobolev_periodic": "nu",
    "sobolev_periodic_const": "nu",
    "wendland": "p",
}


def _fail(field_name, msg):
    raise InvalidArgumentError(f"config field '{field_name}': {msg}")


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        _fail(where, f"expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - allowed)
    if unknown:
        _fail(f"{where}.{unknown[0]}" if where else unknown[0], f"unknown field; allowed: {sorted(allowed)}")


def _number(v, name, *, integer=False, positive=False, nonneg=False):
    if isinstance(v, str):
        # YAML 1.1 reads exponent forms without a dot (1e-6) as strings
        try:
            v = float(v)
        except ValueError:
            _fail(name, f"expected a number, got {v!r}")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(name, f"expected a number, got {v!r}")
    if integer and v != int(v):
        _fail(name, f"expected an integer, got {v!r}")
    if not math.isfinite(v):
        _fail(name, "must be finite")
    if positive and v <= 0:
        _fail(name, f"must be > 0, got {v!r}")
    if nonneg and v < 0:
        _fail(name, f"must be >= 0, got {v!r}")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class DataSource:
    csv: str | None = None
    response: str = "y"
    standardize: bool = False
    test_csv: str | None = None
    model: str | None = None
    n: int | None = None
    sigma: float = 3.0
    seed: int = 0
    p: int = 1
    rho: float = 0.0
    latent_dim: int = 4
    test_n: int = 0

    @property
    def simulated(self) -> bool:
        return self.model is not None


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource
    kernels: tuple  # KernelSpec grid, theta-major order
    lambda_spec: dict
    m: int
    m_star: int | None = None
    weights: str = "uniform"
    scores: tuple = ("dgcv",)
    optimizer: str = "grid"
    init_eta: float | None = None
    init_theta: tuple | None = None
    seed: int = 0
    threads: int = 1
    replicates: int = 1
    output: str = "out"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def lambdas(self, N: int) -> np.ndarray:
        """The lambda grid; ``values_over_n`` forms depend on the sample size."""
        s = self.lambda_spec
        if "values" in s:
            return np.asarray(s["values"], dtype=float)
        if "values_over_n" in s:
            return np.asarray(s["values_over_n"], dtype=float) / N
        if "log10_min" in s:
            return np.logspace(s["log10_min"], s["log10_max"], s["count"])
        return np.exp(np.linspace(s["log_min"], s["log_max"], s["count"]))

    def score_kinds(self) -> list:
        return [_kind(text, self.m_star) for text in self.scores]


def _kind(text, m_star) -> ScoreKind:
    """Like ``ScoreKind.parse`` but a bare ``dgcv_star`` takes the configured m_star."""
    text = str(text).strip()
    if text == "dgcv_star":
        if m_star is None:
            raise InvalidArgumentError("dgcv_star needs m_star (inline as dgcv_star:K or via the m_star field)")
        return ScoreKind("dgcv_star", m_star=m_star)
    return ScoreKind.parse(text)


def _parse_data(d) -> DataSource:
    _check_keys(d, _DATA_KEYS, "data")
    has_csv, has_sim = "csv" in d, "simulate" in d
    if has_csv == has_sim:
        _fail("data", "give exactly one of 'csv' or 'simulate'")
    kw = {}
    if has_csv:
        if not isinstance(d["csv"], str):
            _fail("data.csv", "expected a path string")
        kw["csv"] = d["csv"]
        if "test_csv" in d:
            kw["test_csv"] = str(d["test_csv"])
        resp = d.get("response", "y")
        if not isinstance(resp, (str, int)) or isinstance(resp, bool):
            _fail("data.response", "expected a column name or zero-based index")
        kw["response"] = resp
        std = d.get("standardize", False)
        if not isinstance(std, bool):
            _fail("data.standardize", "expected true or false")
        kw["standardize"] = std
        return DataSource(**kw)
    if any(k in d for k in ("response", "standardize", "test_csv")):
        _fail("data", "response/standardize/test_csv apply to csv sources only")
    sim = d["simulate"]
    _check_keys(sim, _SIM_KEYS, "data.simulate")
    model = sim.get("model")
    if model not in SIMULATORS:
        _fail("data.simulate.model", f"expected one of {SIMULATORS}, got {model!r}")
    if "n" not in sim:
        _fail("data.simulate.n", "required")
    kw = {"model": model, "n": _number(sim["n"], "data.simulate.n", integer=True, positive=True)}
    if "sigma" in sim:
        kw["sigma"] = _number(sim["sigma"], "data.simulate.sigma", nonneg=True)
    elif model == "song":
        kw["sigma"] = 1.0
    if "seed" in sim:
        kw["seed"] = _number(sim["seed"], "data.simulate.seed", integer=True, nonneg=True)
    if "test_n" in sim:
        kw["test_n"] = _number(sim["test_n"], "data.simulate.test_n", integer=True, nonneg=True)
    if "p" in sim:
        kw["p"] = _number(sim["p"], "data.simulate.p", integer=True, positive=True)
    elif model == "song":
        kw["p"] = 90
    if "rho" in sim:
        kw["rho"] = _number(sim["rho"], "data.simulate.rho", nonneg=True)
        if kw["rho"] >= 1:
            _fail("data.simulate.rho", "must lie in [0, 1)")
    if "latent_dim" in sim:
        kw["latent_dim"] = _number(sim["latent_dim"], "data.simulate.latent_dim", integer=True, positive=True)
    if model == "wendland" and not 1 <= kw.get("p", 1) <= 5:
        _fail("data.simulate.p", "wendland simulator needs 1 <= p <= 5")
    return DataSource(**kw)


def _parse_kernel(d) -> tuple:
    if not isinstance(d, dict):
        _fail("kernel", "expected a mapping")
    family = d.get("family")
    if family == "additive":
        _check_keys(d, {"family", "children"}, "kernel")
        children = d.get("children")
        if not isinstance(children, list) or not children:
            _fail("kernel.children", "expected a nonempty list of kernels")
        specs = []
        for j, child in enumerate(children):
            inner = _parse_kernel(child)
            if len(inner) != 1:
                _fail(f"kernel.children[{j}]", "additive children take scalar parameters, not grids")
            specs.append(inner[0])
        return (KernelSpec.additive(specs),)
    if family not in _PARAM_NAMES:
        _fail("kernel.family", f"expected one of {sorted(_PARAM_NAMES) + ['additive']}, got {family!r}")
    pname = _PARAM_NAMES[family]
    _check_keys(d, {"family", pname}, "kernel")
    if pname not in d:
        _fail(f"kernel.{pname}", f"required for family {family}")
    vals = d[pname] if isinstance(d[pname], list) else [d[pname]]
    if not vals:
        _fail(f"kernel.{pname}", "grid must be nonempty")
    specs = []
    for v in vals:
        v = _number(v, f"kernel.{pname}")
        try:
            specs.append(KernelSpec(family, (v,)))
        except InvalidArgumentError as exc:
            _fail(f"kernel.{pname}", str(exc))
    return tuple(specs)


def _parse_lambda(d) -> dict:
    if not isinstance(d, dict):
        _fail("lambda", "expected a mapping")
    for form in _LAMBDA_FORMS:
        if set(d) == set(form):
            break
    else:
        _fail("lambda", f"expected one of the key sets {[list(f) for f in _LAMBDA_FORMS]}, got {sorted(d)}")
    out = {}
    if "count" in d:
        out["count"] = _number(d["count"], "lambda.count", integer=True, positive=True)
        lo, hi = form[0], form[1]
        out[lo] = _number(d[lo], f"lambda.{lo}")
        out[hi] = _number(d[hi], f"lambda.{hi}")
        if out[lo] > out[hi]:
            _fail(f"lambda.{lo}", f"must not exceed {hi}")
        return out
    key = form[0]
    vals = d[key]
    if not isinstance(vals, list) or not vals:
        _fail(f"lambda.{key}", "expected a nonempty list")
    out[key] = [_number(v, f"lambda.{key}", positive=True) for v in vals]
    return out


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate YAML text, applying defaults."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidArgumentError(f"config is not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    _check_keys(raw, _TOP_KEYS, "")
    for req in ("data", "kernel", "lambda", "m"):
        if req not in raw:
            _fail(req, "required")
    data = _parse_data(raw["data"])
    kernels = _parse_kernel(raw["kernel"])
    lam = _parse_lambda(raw["lambda"])
    m = _number(raw["m"], "m", integer=True, positive=True)
    if data.simulated and m > data.n:
        _fail("m", f"cannot exceed the sample size {data.n}")

    m_star = raw.get("m_star")
    if m_star is not None:
        if m_star == "tenth":
            m_star = math.ceil(m / 10)
        else:
            m_star = _number(m_star, "m_star", integer=True, positive=True)
        if m_star > m:
            _fail("m_star", f"must satisfy 1 <= m_star <= m = {m}, got {m_star}")

    weights = raw.get("weights", "uniform")
    if weights not in ("uniform", "subset"):
        _fail("weights", f"expected 'uniform' or 'subset', got {weights!r}")
    if weights == "subset" and m_star is None:
        _fail("weights", "subset weights need m_star")

    scores = raw.get("scores", ["dgcv"])
    if isinstance(scores, str):
        scores = [scores]
    if not isinstance(scores, list) or not scores:
        _fail("scores", "expected a nonempty list")
    for s in scores:
        try:
            kind = _kind(s, m_star)
        except InvalidArgumentError as exc:
            _fail("scores", str(exc))
        if kind.name == "dgcv_star" and kind.m_star > m:
            _fail("m_star", f"must satisfy 1 <= m_star <= m = {m}, got {kind.m_star}")
        if kind.name in ("cp", "risk") and kind.sigma2 is None and not data.simulated:
            _fail("scores", f"{kind.name} on csv data needs sigma^2 inline, as {kind.name}:<value>")
        if kind.name in ("true_loss", "risk") and not data.simulated:
            _fail("scores", f"{kind.name} needs a simulated data source with a known truth")
    scores = tuple(str(s) for s in scores)

    optimizer = raw.get("optimizer", "grid")
    if optimizer not in ("grid", "newton"):
        _fail("optimizer", f"expected 'grid' or 'newton', got {optimizer!r}")
    init_eta = raw.get("init_eta")
    if init_eta is not None:
        init_eta = _number(init_eta, "init_eta")
    init_theta = raw.get("init_theta")
    if init_theta is not None:
        vals = init_theta if isinstance(init_theta, list) else [init_theta]
        init_theta = tuple(_number(v, "init_theta", positive=True) for v in vals)
        if len(init_theta) != kernels[0].n_theta:
            _fail("init_theta", f"expected {kernels[0].n_theta} value(s)")

    seed = _number(raw.get("seed", 0), "seed", integer=True, nonneg=True)
    threads = raw.get("threads")
    if threads is None:
        threads = os.cpu_count() or 1
    else:
        threads = _number(threads, "threads", integer=True, positive=True)
    replicates = _number(raw.get("replicates", 1), "replicates", integer=True, positive=True)
    if replicates > 1 and not data.simulated:
        _fail("replicates", "replicates > 1 need a simulated data source")
    output = raw.get("output", "out")
    if not isinstance(output, str):
        _fail("output", "expected a directory path")

    return ExperimentConfig(
        data=data,
        kernels=kernels,
        lambda_spec=lam,
        m=m,
        m_star=m_star,
        weights=weights,
        scores=scores,
        optimizer=optimizer,
        init_eta=init_eta,
        init_theta=init_theta,
        seed=seed,
        threads=threads,
        replicates=replicates,
        output=output,
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
