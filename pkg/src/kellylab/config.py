"""Experiment configuration: a versioned YAML schema with line-precise errors.

One file describes a full experiment: the market (one regime or a Markov
chain of them), impact coefficients, episode geometry, the training
hyperparameters, the regime-detector settings, and the run plan (seeds,
evaluation episode counts, output directory). load_config validates every
block on load and reports violations as ConfigError with the offending
file:line and dotted key path.

to_dict() emits the fully resolved state, so dump/parse round-trips are
idempotent byte-for-byte.
"""

from dataclasses import dataclass

import numpy as np
import yaml

from .analytic import stationary_distribution
from .env import EnvConfig
from .errors import ConfigError
from .hmm import HmmFitConfig
from .impact import ImpactParams
from .market import MarketParams, RegimeModel
from .rl import TrainConfig

CONFIG_FORMAT = "yaml/1"

_MISSING = object()


def _line_map(text: str) -> dict:
    """Dotted key path -> 1-based source line, from the YAML node tree."""
    root = yaml.compose(text)
    lines = {}

    def walk(node, path):
        if node is None:
            return
        if path not in lines:
            lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                child = f"{path}.{key_node.value}" if path else str(key_node.value)
                lines[child] = key_node.start_mark.line + 1
                walk(value_node, child)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, f"{path}[{i}]")

    walk(root, "")
    return lines


class _Ctx:
    def __init__(self, lines: dict, filename):
        self.lines = lines
        self.filename = filename

    def fail(self, path, message):
        raise ConfigError(
            message, path=path or None, line=self.lines.get(path),
            filename=self.filename,
        )


class _Reader:
    """Typed access to one mapping block with path-tagged errors."""

    def __init__(self, mapping, path: str, ctx: _Ctx):
        if not isinstance(mapping, dict):
            ctx.fail(path, f"expected a mapping, got {type(mapping).__name__}")
        self.mapping = mapping
        self.path = path
        self.ctx = ctx

    def child_path(self, key) -> str:
        return f"{self.path}.{key}" if self.path else str(key)

    def has(self, key) -> bool:
        return key in self.mapping

    def raw(self, key, default=_MISSING):
        if key not in self.mapping:
            if default is _MISSING:
                self.ctx.fail(self.path, f"missing required key {key!r}")
            return default
        return self.mapping[key]

    def section(self, key, required=True):
        value = self.raw(key, default=None if not required else _MISSING)
        if value is None:
            return None
        return _Reader(value, self.child_path(key), self.ctx)

    def number(self, key, default=_MISSING) -> float:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return default
        return self._coerce_number(self.child_path(key), value)

    def _coerce_number(self, path, value) -> float:
        if isinstance(value, bool) or value is None:
            self.ctx.fail(path, f"expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        # tolerate "1e-9": YAML 1.1 resolves exponent-only floats as strings
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        self.ctx.fail(path, f"expected a number, got {value!r}")

    def integer(self, key, default=_MISSING) -> int:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return default
        if isinstance(value, bool) or not isinstance(value, int):
            self.ctx.fail(self.child_path(key), f"expected an integer, got {value!r}")
        return value

    def boolean(self, key, default=_MISSING) -> bool:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return default
        if not isinstance(value, bool):
            self.ctx.fail(self.child_path(key), f"expected true/false, got {value!r}")
        return value

    def string(self, key, default=_MISSING) -> str:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return default
        if not isinstance(value, str):
            self.ctx.fail(self.child_path(key), f"expected a string, got {value!r}")
        return value

    def number_list(self, key, default=_MISSING) -> list:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return default
        path = self.child_path(key)
        if not isinstance(value, list) or not value:
            self.ctx.fail(path, "expected a non-empty list of numbers")
        return [self._coerce_number(f"{path}[{i}]", v) for i, v in enumerate(value)]

    def matrix(self, key) -> list:
        value = self.raw(key)
        path = self.child_path(key)
        if not isinstance(value, list) or not value:
            self.ctx.fail(path, "expected a non-empty list of rows")
        rows = []
        for i, row in enumerate(value):
            if not isinstance(row, list):
                self.ctx.fail(f"{path}[{i}]", "expected a list of numbers")
            rows.append(
                [self._coerce_number(f"{path}[{i}][{j}]", v) for j, v in enumerate(row)]
            )
        return rows

    def int_list(self, key, default=_MISSING) -> list:
        value = self.raw(key, default)
        if value is default and default is not _MISSING:
            return default
        path = self.child_path(key)
        if not isinstance(value, list) or not value:
            self.ctx.fail(path, "expected a non-empty list of integers")
        out = []
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, int):
                self.ctx.fail(f"{path}[{i}]", f"expected an integer, got {v!r}")
            out.append(v)
        return out

    def reject_unknown(self, allowed):
        for key in self.mapping:
            if key not in allowed:
                self.ctx.fail(
                    self.child_path(key),
                    f"unknown key {key!r} (expected one of: {', '.join(sorted(allowed))})",
                )


@dataclass
class RunConfig:
    seeds: tuple = (0,)
    eval_episodes: int = 400
    hmm_fit_episodes: int = 10
    hmm_eval_episodes: int = 10
    output_dir: str = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for name in ("eval_episodes", "hmm_fit_episodes", "hmm_eval_episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class BaselineConfig:
    """Settings for analytic-baseline evaluation and the ramp grid search."""

    fraction: float = 1.0
    adjustment_periods: int = 1
    use_true_regime: bool = True
    episodes_per_cell: int = 20
    fractions: tuple = None
    adjustment_grid: tuple = None

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.adjustment_periods < 1:
            raise ValueError("adjustment_periods must be >= 1")
        if self.episodes_per_cell < 1:
            raise ValueError("episodes_per_cell must be >= 1")
        if self.fractions is not None:
            self.fractions = tuple(float(f) for f in self.fractions)
        if self.adjustment_grid is not None:
            self.adjustment_grid = tuple(int(n) for n in self.adjustment_grid)


@dataclass
class QSurfaceConfig:
    w_min: float = -1.0
    w_max: float = 3.0
    steps: int = 41

    def __post_init__(self):
        if not self.w_max > self.w_min:
            raise ValueError("w_max must exceed w_min")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")

    def grid(self) -> np.ndarray:
        return np.linspace(self.w_min, self.w_max, self.steps)


@dataclass
class ExperimentConfig:
    env: EnvConfig
    algo: TrainConfig
    context_policy: bool
    hmm: HmmFitConfig
    run: RunConfig
    baseline: BaselineConfig = None
    qsurface: QSurfaceConfig = None

    @property
    def market(self) -> RegimeModel:
        return self.env.market

    @property
    def impact(self) -> ImpactParams:
        return self.env.impact

    def to_dict(self) -> dict:
        market = self.env.market
        d = {
            "market": {
                "regimes": [
                    {
                        "mu": [float(x) for x in p.mu],
                        "sigma": [float(x) for x in p.sigma],
                        "corr": [[float(x) for x in row] for row in p.corr],
                        "cash_rate": float(p.cash_rate),
                    }
                    for p in market.regimes
                ],
                "transition": [[float(x) for x in row] for row in market.transition],
                "initial_dist": [float(x) for x in market.initial_dist],
            },
            "impact": {
                "eta": float(self.env.impact.eta),
                "gamma": float(self.env.impact.gamma),
            },
            "env": {
                "horizon_years": float(self.env.horizon_years),
                "periods_per_year": int(self.env.periods_per_year),
                "window": int(self.env.window),
                "initial_wealth": float(self.env.initial_wealth),
                "discount": float(self.env.discount),
            },
            "algo": {
                "name": self.algo.algo,
                "total_steps": int(self.algo.total_steps),
                "context_policy": bool(self.context_policy),
                "learning_rate": float(self.algo.learning_rate),
                "rollout_steps": int(self.algo.rollout_steps),
                "batch_size": int(self.algo.batch_size),
                "n_epochs": int(self.algo.n_epochs),
                "clip_range": float(self.algo.clip_range),
                "discount": float(self.algo.discount),
                "gae_lambda": float(self.algo.gae_lambda),
                "value_coef": float(self.algo.value_coef),
                "entropy_coef": float(self.algo.entropy_coef),
                "max_grad_norm": float(self.algo.max_grad_norm),
                "clipping_enabled": bool(self.algo.clipping_enabled),
                "init_log_std": float(self.algo.init_log_std),
                "advantage_normalization": bool(self.algo.advantage_normalization),
            },
            "hmm": {
                "n_states": int(self.hmm.n_states),
                "n_init": int(self.hmm.n_init),
                "max_iter": int(self.hmm.max_iter),
                "tol": float(self.hmm.tol),
                "mean_prior": float(self.hmm.mean_prior),
                "covar_prior": float(self.hmm.covar_prior),
                "min_covar": float(self.hmm.min_covar),
            },
            "run": {
                "seeds": list(self.run.seeds),
                "eval_episodes": int(self.run.eval_episodes),
                "hmm_fit_episodes": int(self.run.hmm_fit_episodes),
                "hmm_eval_episodes": int(self.run.hmm_eval_episodes),
            },
        }
        if self.run.output_dir is not None:
            d["run"]["output_dir"] = self.run.output_dir
        if self.baseline is not None:
            b = {
                "fraction": float(self.baseline.fraction),
                "adjustment_periods": int(self.baseline.adjustment_periods),
                "use_true_regime": bool(self.baseline.use_true_regime),
                "episodes_per_cell": int(self.baseline.episodes_per_cell),
            }
            if self.baseline.fractions is not None:
                b["fractions"] = [float(f) for f in self.baseline.fractions]
            if self.baseline.adjustment_grid is not None:
                b["adjustment_grid"] = list(self.baseline.adjustment_grid)
            d["baseline"] = b
        if self.qsurface is not None:
            d["qsurface"] = {
                "w_min": float(self.qsurface.w_min),
                "w_max": float(self.qsurface.w_max),
                "steps": int(self.qsurface.steps),
            }
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump())


def _parse_regime(reader: _Reader) -> MarketParams:
    reader.reject_unknown({"mu", "sigma", "corr", "cash_rate", "name"})
    mu = reader.number_list("mu")
    sigma = reader.number_list("sigma")
    corr = reader.matrix("corr")
    cash_rate = reader.number("cash_rate")
    try:
        return MarketParams(mu=mu, sigma=sigma, corr=corr, cash_rate=cash_rate)
    except ConfigError:
        raise
    except ValueError as exc:
        reader.ctx.fail(reader.path, str(exc))


def _parse_market(reader: _Reader) -> RegimeModel:
    if reader.has("regimes"):
        reader.reject_unknown({"regimes", "transition", "initial_dist"})
        regimes_raw = reader.raw("regimes")
        path = reader.child_path("regimes")
        if not isinstance(regimes_raw, list) or not regimes_raw:
            reader.ctx.fail(path, "expected a non-empty list of regime mappings")
        regimes = [
            _parse_regime(_Reader(r, f"{path}[{i}]", reader.ctx))
            for i, r in enumerate(regimes_raw)
        ]
        k = len(regimes)
        if k == 1:
            transition = np.ones((1, 1))
            if reader.has("transition"):
                transition = np.asarray(reader.matrix("transition"))
        else:
            if not reader.has("transition"):
                reader.ctx.fail(
                    reader.path,
                    f"{k} regimes need a transition matrix",
                )
            transition = np.asarray(reader.matrix("transition"))
        initial_raw = reader.raw("initial_dist", default="stationary")
        if isinstance(initial_raw, str):
            if initial_raw != "stationary":
                reader.ctx.fail(
                    reader.child_path("initial_dist"),
                    f"expected 'stationary' or a list of probabilities, "
                    f"got {initial_raw!r}",
                )
            if k == 1:
                initial = np.ones(1)
            else:
                try:
                    initial = stationary_distribution(transition)
                except ConfigError:
                    raise
                except ValueError as exc:
                    reader.ctx.fail(reader.child_path("transition"), str(exc))
        else:
            initial = np.asarray(reader.number_list("initial_dist"))
        try:
            return RegimeModel(regimes, transition, initial)
        except ConfigError:
            raise
        except ValueError as exc:
            reader.ctx.fail(reader.path, str(exc))
    # single-regime sugar: market block is itself a regime table
    try:
        return RegimeModel.single(_parse_regime(reader))
    except ConfigError:
        raise
    except ValueError as exc:
        reader.ctx.fail(reader.path, str(exc))


def parse_config(text: str, filename=None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(
            str(exc),
            line=None if mark is None else mark.line + 1,
            filename=filename,
        ) from exc
    ctx = _Ctx(_line_map(text), filename)
    root = _Reader(data if data is not None else {}, "", ctx)
    root.reject_unknown(
        {"market", "impact", "env", "algo", "hmm", "run", "baseline", "qsurface"}
    )

    market = _parse_market(root.section("market"))

    impact_r = root.section("impact")
    impact_r.reject_unknown({"eta", "gamma"})
    try:
        impact = ImpactParams(
            eta=impact_r.number("eta"), gamma=impact_r.number("gamma")
        )
    except ConfigError:
        raise
    except ValueError as exc:
        ctx.fail("impact", str(exc))

    env_r = root.section("env")
    env_r.reject_unknown(
        {"horizon_years", "periods_per_year", "window", "initial_wealth", "discount"}
    )
    try:
        env = EnvConfig(
            horizon_years=env_r.number("horizon_years"),
            periods_per_year=env_r.integer("periods_per_year"),
            window=env_r.integer("window"),
            initial_wealth=env_r.number("initial_wealth"),
            market=market,
            impact=impact,
            discount=env_r.number("discount", default=0.99),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        ctx.fail("env", str(exc))

    algo_r = root.section("algo")
    algo_r.reject_unknown(
        {
            "name",
            "total_steps",
            "context_policy",
            "learning_rate",
            "rollout_steps",
            "batch_size",
            "n_epochs",
            "clip_range",
            "discount",
            "gae_lambda",
            "value_coef",
            "entropy_coef",
            "max_grad_norm",
            "clipping_enabled",
            "init_log_std",
            "advantage_normalization",
        }
    )
    name = algo_r.string("name")
    if name not in ("ppo", "a2c"):
        ctx.fail("algo.name", f"algo must be 'ppo' or 'a2c', got {name!r}")
    context_policy = algo_r.boolean("context_policy", default=False)
    overrides = {}
    for key, getter in (
        ("learning_rate", algo_r.number),
        ("rollout_steps", algo_r.integer),
        ("batch_size", algo_r.integer),
        ("n_epochs", algo_r.integer),
        ("clip_range", algo_r.number),
        ("gae_lambda", algo_r.number),
        ("value_coef", algo_r.number),
        ("entropy_coef", algo_r.number),
        ("max_grad_norm", algo_r.number),
        ("init_log_std", algo_r.number),
    ):
        if algo_r.has(key):
            overrides[key] = getter(key)
    for key in ("clipping_enabled", "advantage_normalization"):
        if algo_r.has(key):
            overrides[key] = algo_r.boolean(key)
    # the discount lives in the env block; an algo-level value overrides it
    overrides["discount"] = algo_r.number("discount", default=env.discount)
    builder = TrainConfig.ppo if name == "ppo" else TrainConfig.a2c
    try:
        algo = builder(algo_r.integer("total_steps"), **overrides)
    except ConfigError:
        raise
    except ValueError as exc:
        ctx.fail("algo", str(exc))

    hmm_r = root.section("hmm", required=False)
    if hmm_r is None:
        if context_policy:
            ctx.fail(
                "algo.context_policy",
                "a context policy needs an explicit hmm block for its "
                "regime detector",
            )
        hmm = HmmFitConfig()
    else:
        hmm_r.reject_unknown(
            {
                "n_states",
                "n_init",
                "max_iter",
                "tol",
                "mean_prior",
                "covar_prior",
                "min_covar",
            }
        )
        try:
            hmm = HmmFitConfig(
                n_states=hmm_r.integer("n_states", default=2),
                n_init=hmm_r.integer("n_init", default=10),
                max_iter=hmm_r.integer("max_iter", default=100),
                tol=hmm_r.number("tol", default=1e-7),
                mean_prior=hmm_r.number("mean_prior", default=1e-4),
                covar_prior=hmm_r.number("covar_prior", default=1e-4),
                min_covar=hmm_r.number("min_covar", default=1e-6),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            ctx.fail("hmm", str(exc))
    if context_policy and market.n_regimes < 2:
        ctx.fail(
            "algo.context_policy",
            "a context policy needs a regime-switching market (>= 2 regimes)",
        )

    run_r = root.section("run", required=False)
    if run_r is None:
        run = RunConfig()
    else:
        run_r.reject_unknown(
            {
                "seeds",
                "eval_episodes",
                "hmm_fit_episodes",
                "hmm_eval_episodes",
                "output_dir",
            }
        )
        try:
            run = RunConfig(
                seeds=tuple(run_r.int_list("seeds", default=[0])),
                eval_episodes=run_r.integer("eval_episodes", default=400),
                hmm_fit_episodes=run_r.integer("hmm_fit_episodes", default=10),
                hmm_eval_episodes=run_r.integer("hmm_eval_episodes", default=10),
                output_dir=run_r.string("output_dir", default=None),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            ctx.fail("run", str(exc))

    baseline_r = root.section("baseline", required=False)
    baseline = None
    if baseline_r is not None:
        baseline_r.reject_unknown(
            {
                "fraction",
                "adjustment_periods",
                "use_true_regime",
                "episodes_per_cell",
                "fractions",
                "adjustment_grid",
            }
        )
        try:
            baseline = BaselineConfig(
                fraction=baseline_r.number("fraction", default=1.0),
                adjustment_periods=baseline_r.integer("adjustment_periods", default=1),
                use_true_regime=baseline_r.boolean("use_true_regime", default=True),
                episodes_per_cell=baseline_r.integer("episodes_per_cell", default=20),
                fractions=baseline_r.number_list("fractions", default=None),
                adjustment_grid=baseline_r.int_list("adjustment_grid", default=None),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            ctx.fail("baseline", str(exc))

    qsurface_r = root.section("qsurface", required=False)
    qsurface = None
    if qsurface_r is not None:
        qsurface_r.reject_unknown({"w_min", "w_max", "steps"})
        try:
            qsurface = QSurfaceConfig(
                w_min=qsurface_r.number("w_min", default=-1.0),
                w_max=qsurface_r.number("w_max", default=3.0),
                steps=qsurface_r.integer("steps", default=41),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            ctx.fail("qsurface", str(exc))

    return ExperimentConfig(
        env=env,
        algo=algo,
        context_policy=context_policy,
        hmm=hmm,
        run=run,
        baseline=baseline,
        qsurface=qsurface,
    )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, filename=str(path))


@dataclass
class SweepSpec:
    """One dotted config key and the values to sweep it over."""

    key: str
    values: list

    def __post_init__(self):
        if not self.key or "." not in self.key:
            raise ValueError(
                f"sweep key must be a dotted path into the config, got {self.key!r}"
            )
        if not self.values:
            raise ValueError("sweep values must be non-empty")


def load_sweep(path) -> SweepSpec:
    with open(path) as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(
            str(exc),
            line=None if mark is None else mark.line + 1,
            filename=str(path),
        ) from exc
    ctx = _Ctx(_line_map(text), str(path))
    reader = _Reader(data, "", ctx)
    reader.reject_unknown({"key", "values"})
    key = reader.string("key")
    values = reader.raw("values")
    if not isinstance(values, list) or not values:
        ctx.fail("values", "expected a non-empty list")
    try:
        return SweepSpec(key=key, values=values)
    except ValueError as exc:
        ctx.fail("", str(exc))


def apply_override(data: dict, dotted_key: str, value) -> dict:
    """Set one dotted key in a nested config dict, returning a deep copy.

    The parent blocks must already exist (typo protection); the leaf itself
    may be new, since omitted keys fall back to defaults.
    """
    import copy

    out = copy.deepcopy(data)
    parts = dotted_key.split(".")
    node = out
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(
                f"no such config block {'.'.join(parts[: i + 1])!r}",
                path=dotted_key,
            )
        node = node[part]
    if not isinstance(node, dict):
        raise ConfigError(
            f"{'.'.join(parts[:-1])!r} is not a mapping", path=dotted_key
        )
    node[parts[-1]] = value
    return out
