"""Multivariate Gaussian hidden Markov model over per-period log returns.

Fitting is Viterbi training (hard EM): decode the current best state path,
then re-estimate parameters from the hard assignments with small conjugate
priors and a covariance eigenvalue floor. The detection problem here is tiny
(K = 2 states, 3 features), so everything is dense and exact; log-domain
arithmetic keeps million-step sequences from underflowing.

The fit works on raw, unlabelled returns; mapping the arbitrary state indices
onto simulator regimes (label switching) is the job of align_labels, and
accuracy() scores against the best label permutation so callers cannot get it
wrong silently.
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import AlignmentError, FitError

_MAX_REINIT_ATTEMPTS = 10


@dataclass
class HmmFitConfig:
    n_states: int = 2
    n_init: int = 10
    max_iter: int = 100
    tol: float = 1e-7
    mean_prior: float = 1e-4
    covar_prior: float = 1e-4
    min_covar: float = 1e-6

    def __post_init__(self):
        for name in (
            "n_states",
            "n_init",
            "max_iter",
            "tol",
            "mean_prior",
            "covar_prior",
            "min_covar",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class GaussianHmmModel:
    means: np.ndarray
    covariances: np.ndarray
    transition: np.ndarray
    initial: np.ndarray
    # joint log-likelihood per training iteration of the winning restart
    fit_history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        k, n = self.means.shape
        if self.covariances.shape != (k, n, n):
            raise ValueError(
                f"covariances must be ({k}, {n}, {n}), got {self.covariances.shape}"
            )
        for i in range(k):
            if not np.allclose(self.covariances[i], self.covariances[i].T, atol=1e-12):
                raise ValueError(f"covariance {i} is not symmetric")
            np.linalg.cholesky(self.covariances[i])  # PD check
        if self.transition.shape != (k, k) or np.any(self.transition < 0):
            raise ValueError("transition must be a non-negative (K, K) matrix")
        if not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if self.initial.shape != (k,) or np.any(self.initial < 0):
            raise ValueError("initial must be a non-negative length-K vector")
        if not np.isclose(self.initial.sum(), 1.0, atol=1e-9):
            raise ValueError("initial must sum to 1")

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def n_features(self) -> int:
        return self.means.shape[1]


def _emission_logprobs(model: GaussianHmmModel, x: np.ndarray) -> np.ndarray:
    """log N(x_t | mean_k, cov_k) for every (t, k), shape (T, K)."""
    t, n = x.shape
    out = np.empty((t, model.n_states))
    for k in range(model.n_states):
        chol = np.linalg.cholesky(model.covariances[k])
        diff = x - model.means[k]
        z = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
        quad = np.sum(z * z, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, k] = -0.5 * (quad + logdet + n * np.log(2.0 * np.pi))
    return out


def decode(model: GaussianHmmModel, sequence) -> np.ndarray:
    """Most-likely state path (Viterbi) in log domain."""
    x = np.atleast_2d(np.asarray(sequence, dtype=np.float64))
    t_len = x.shape[0]
    k = model.n_states
    if k == 1:
        return np.zeros(t_len, dtype=np.int64)
    with np.errstate(divide="ignore"):
        log_trans = np.log(model.transition)
        log_init = np.log(model.initial)
    emis = _emission_logprobs(model, x)
    score = log_init + emis[0]
    backptr = np.empty((t_len, k), dtype=np.int64)
    for t in range(1, t_len):
        cand = score[:, None] + log_trans
        backptr[t] = np.argmax(cand, axis=0)
        score = cand[backptr[t], np.arange(k)] + emis[t]
    path = np.empty(t_len, dtype=np.int64)
    path[-1] = int(np.argmax(score))
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = backptr[t, path[t]]
    return path


def predict_current(model: GaussianHmmModel, window) -> int:
    """Regime label now: final state of the decode over a recent window."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    if window.shape[0] < 1:
        raise ValueError("window must contain at least one return row")
    return int(decode(model, window)[-1])


def _path_log_likelihood(model, sequences, paths) -> float:
    with np.errstate(divide="ignore"):
        log_trans = np.log(model.transition)
        log_init = np.log(model.initial)
    total = 0.0
    for x, z in zip(sequences, paths):
        emis = _emission_logprobs(model, x)
        total += log_init[z[0]] + emis[np.arange(len(z)), z].sum()
        total += log_trans[z[:-1], z[1:]].sum()
    return float(total)


def _floor_covariance(cov: np.ndarray, min_covar: float) -> np.ndarray:
    """Raise eigenvalues to at least min_covar, keeping symmetry exact."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] >= min_covar:
        return cov
    vals = np.maximum(vals, min_covar)
    floored = (vecs * vals) @ vecs.T
    return 0.5 * (floored + floored.T)


def _m_step(sequences, paths, config: HmmFitConfig):
    """Closed-form penalized re-estimation from hard assignments.

    Means shrink toward zero with weight mean_prior and covariances carry a
    covar_prior * I ridge; both are the exact maximizers of the penalized
    complete-data objective, so training log-likelihood is monotone up to the
    floor. Returns None when some state received no observations or has no
    outgoing transitions (degenerate restart).
    """
    k = config.n_states
    n = sequences[0].shape[1]
    x_all = np.vstack(sequences)
    z_all = np.concatenate(paths)

    counts = np.bincount(z_all, minlength=k).astype(np.float64)
    if np.any(counts == 0):
        return None

    means = np.empty((k, n))
    covariances = np.empty((k, n, n))
    for s in range(k):
        rows = x_all[z_all == s]
        means[s] = rows.sum(axis=0) / (counts[s] + config.mean_prior)
        diff = rows - means[s]
        scatter = diff.T @ diff
        cov = (
            scatter
            + config.mean_prior * np.outer(means[s], means[s])
            + config.covar_prior * np.eye(n)
        ) / counts[s]
        covariances[s] = _floor_covariance(cov, config.min_covar)

    trans_counts = np.zeros((k, k))
    init_counts = np.zeros(k)
    for z in paths:
        init_counts[z[0]] += 1
        np.add.at(trans_counts, (z[:-1], z[1:]), 1.0)
    row_sums = trans_counts.sum(axis=1)
    if np.any(row_sums == 0):
        return None
    transition = trans_counts / row_sums[:, None]
    initial = init_counts / init_counts.sum()

    return GaussianHmmModel(means, covariances, transition, initial)


def _random_init(x_all, config: HmmFitConfig, rng) -> GaussianHmmModel:
    k = config.n_states
    n = x_all.shape[1]
    idx = rng.choice(x_all.shape[0], size=k, replace=False)
    means = x_all[idx].copy()
    global_cov = np.cov(x_all.T).reshape(n, n)
    cov = _floor_covariance(global_cov, config.min_covar)
    covariances = np.repeat(cov[None], k, axis=0)
    transition = np.full((k, k), 0.2 / max(k - 1, 1))
    np.fill_diagonal(transition, 0.8)
    if k == 1:
        transition = np.ones((1, 1))
    initial = np.full(k, 1.0 / k)
    return GaussianHmmModel(means, covariances, transition, initial)


def fit(sequences, config: HmmFitConfig = None, rng=None) -> GaussianHmmModel:
    """Hard-EM fit over a list of (T_i, n) log-return matrices.

    Runs n_init random restarts (re-drawing a restart whose assignment
    degenerates, up to a retry cap) and keeps the best final joint
    log-likelihood. The winning restart's per-iteration log-likelihoods are
    left on the model as fit_history.
    """
    if config is None:
        config = HmmFitConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    sequences = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in sequences]
    if not sequences:
        raise ValueError("need at least one sequence")
    n = sequences[0].shape[1]
    for i, s in enumerate(sequences):
        if s.shape[1] != n:
            raise ValueError(f"sequence {i} has {s.shape[1]} features, expected {n}")
        if s.shape[0] < config.n_states * 10:
            raise ValueError(
                f"sequence {i} has {s.shape[0]} rows; need >= "
                f"{config.n_states * 10} for {config.n_states} states"
            )
    x_all = np.vstack(sequences)

    best_model = None
    best_ll = -np.inf
    any_success = False
    for _restart in range(config.n_init):
        for _attempt in range(_MAX_REINIT_ATTEMPTS):
            model = _random_init(x_all, config, rng)
            trained = _train_restart(sequences, model, config)
            if trained is not None:
                break
        else:
            continue
        any_success = True
        model, history = trained
        if history[-1] > best_ll:
            best_ll = history[-1]
            best_model = model
            best_model.fit_history = history
    if not any_success:
        raise FitError(
            "every restart degenerated (a state kept losing all observations); "
            "data may not support this many states"
        )
    return best_model


def _train_restart(sequences, model, config):
    history = []
    for _iteration in range(config.max_iter):
        paths = [decode(model, x) for x in sequences]
        ll = _path_log_likelihood(model, sequences, paths)
        if history and ll - history[-1] < config.tol:
            history.append(ll)
            return model, history  # converged; model produced history[-1]
        history.append(ll)
        new_model = _m_step(sequences, paths, config)
        if new_model is None:
            return None
        model = new_model
    return model, history


def align_labels(model: GaussianHmmModel, regimes, dt: float) -> np.ndarray:
    """Permutation p with p[state] = simulator regime index.

    Matches each state's mean return to the nearest regime per-period drift
    (mu - sigma^2/2) * dt. Nearest-neighbour by construction; two states
    claiming the same regime is an alignment error (the fit did not separate
    the regimes).
    """
    targets = np.array([(r.mu - 0.5 * r.sigma**2) * dt for r in regimes])
    if targets.shape[0] != model.n_states:
        raise AlignmentError(
            f"{model.n_states} states cannot map onto {targets.shape[0]} regimes"
        )
    perm = np.empty(model.n_states, dtype=np.int64)
    for s in range(model.n_states):
        perm[s] = int(np.argmin(np.sum((targets - model.means[s]) ** 2, axis=1)))
    if len(set(perm.tolist())) != model.n_states:
        raise AlignmentError(
            f"nearest-neighbour matching is not one-to-one (got {perm.tolist()}); "
            "state means do not separate the regimes"
        )
    return perm


def best_permutation(predicted, true) -> np.ndarray:
    """Relabeling perm (perm[state] = label) maximizing agreement with true.

    The robust label-switching resolution when state means do not separate
    the regimes: exhaustive over permutations (small K), ties broken toward
    the lexicographically first permutation, so identity wins when already
    aligned.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ValueError(
            f"label sequences differ in shape: {predicted.shape} vs {true.shape}"
        )
    if predicted.size == 0:
        raise ValueError("label sequences are empty")
    k = int(max(predicted.max(), true.max())) + 1
    if k > 8:
        raise ValueError(f"{k} labels is past the permutation-search cap of 8")
    best_perm = None
    best_score = -1.0
    for perm in itertools.permutations(range(k)):
        remap = np.asarray(perm, dtype=np.int64)[predicted]
        score = float(np.mean(remap == true))
        if score > best_score:
            best_score = score
            best_perm = perm
    return np.asarray(best_perm, dtype=np.int64)


def accuracy(predicted, true) -> float:
    """Fraction of matching labels under the best label permutation.

    Label indices from a fit are arbitrary, so the score is taken over all
    relabelings of the predictions; pre-aligned labels are unaffected
    (identity is always among the candidates).
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    perm = best_permutation(predicted, true)
    return float(np.mean(perm[predicted] == true))


def save(model: GaussianHmmModel, path):
    """Plain-text (JSON) parameter file with full round-trip precision."""
    payload = {
        "format_version": 1,
        "n_states": model.n_states,
        "n_features": model.n_features,
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
        "transition": model.transition.tolist(),
        "initial": model.initial.tolist(),
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def load(path) -> GaussianHmmModel:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format_version") != 1:
        raise ValueError(
            f"unsupported model file version {payload.get('format_version')!r}"
        )
    return GaussianHmmModel(
        means=payload["means"],
        covariances=payload["covariances"],
        transition=payload["transition"],
        initial=payload["initial"],
    )
