"""Representation probes, policy-distance statistics, and latent export.

- regression probe: how well linear / RBF-SVR models recover the true task
  label from per-transition embeddings (test RMSE);
- Gaussian 2-Wasserstein distances between scripted behavior policies and
  their normalized mean distance across a task set;
- Pearson correlation and Welch's t-test for significance reporting;
- CSV export of per-transition latents for external 2-D projection.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.linear_model import LinearRegression
from sklearn.svm import SVR

from . import envs
from .data import TaskDataset
from .envs import GaussianPolicyHead, TaskSpec

logger = logging.getLogger(__name__)

DEFAULT_PROBE_SAMPLES = 1000
DEFAULT_EXPORT_SAMPLES = 256
DEFAULT_PROBE_STATES = 128
PROBE_TRAIN_FRACTION = 0.8
SVR_C = 1.0
SVR_EPSILON = 0.1
MEDIAN_HEURISTIC_MAX_ROWS = 512


@dataclass
class ProbeResult:
    rmse: dict[str, float]  # model name -> test RMSE
    n_train: int
    n_test: int

    def to_json(self) -> dict:
        return {"rmse": self.rmse, "n_train": self.n_train, "n_test": self.n_test}


@dataclass
class PolicyDistanceReport:
    task_ids: list[int]
    pairwise: np.ndarray          # (n, n) mean W2 distances
    mean_distance: float          # sum of pairwise / (action_dim * n^2)
    pearson_rho: float
    pearson_p: float

    def to_json(self) -> dict:
        return {"task_ids": self.task_ids,
                "pairwise": self.pairwise.tolist(),
                "mean_distance": self.mean_distance,
                "pearson_rho": self.pearson_rho,
                "pearson_p": self.pearson_p}


def _embed(encoder, rows: np.ndarray) -> np.ndarray:
    out = encoder.encode_transitions(rows)
    if hasattr(out, "detach"):
        out = out.detach().numpy()
    return np.asarray(out, dtype=float)


def _median_heuristic_gamma(features: np.ndarray, rng: np.random.Generator) -> float:
    rows = features
    if rows.shape[0] > MEDIAN_HEURISTIC_MAX_ROWS:
        rows = rows[rng.choice(rows.shape[0], MEDIAN_HEURISTIC_MAX_ROWS, replace=False)]
    diffs = rows[:, None, :] - rows[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(-1))
    median = float(np.median(dists[np.triu_indices(rows.shape[0], k=1)]))
    if median <= 0:
        return 1.0
    return 1.0 / (2.0 * median ** 2)


def regression_probe(encoder, tasks: list[TaskSpec], datasets: dict[int, TaskDataset],
                     samples_per_task: int = DEFAULT_PROBE_SAMPLES,
                     seed: int = 0) -> ProbeResult:
    """Fit linear and RBF-SVR models predicting goal labels from embeddings.

    Per task, `samples_per_task` transitions are embedded individually and
    labeled with the task's true goal label; pooled samples are split 80/20
    by a seeded shuffle and test RMSE is reported per model.
    """
    if samples_per_task < 10:
        raise ValueError("samples_per_task must be >= 10")
    rng = np.random.default_rng(seed)
    features, labels = [], []
    for task in tasks:
        ds = datasets[task.task_id]
        idx = rng.integers(0, ds.size, size=samples_per_task)
        features.append(_embed(encoder, ds.transitions[idx]))
        labels.append(np.tile(envs.goal_label(task), (samples_per_task, 1)))
    X = np.concatenate(features)
    y = np.concatenate(labels)
    if np.allclose(y, y[0]):
        logger.warning("degenerate probe labels: all tasks share one goal label")

    order = rng.permutation(X.shape[0])
    n_train = int(round(PROBE_TRAIN_FRACTION * X.shape[0]))
    train_idx, test_idx = order[:n_train], order[n_train:]
    X_tr, X_te, y_tr, y_te = X[train_idx], X[test_idx], y[train_idx], y[test_idx]

    rmse = {}
    linear = LinearRegression().fit(X_tr, y_tr)
    rmse["linear"] = float(np.sqrt(np.mean((linear.predict(X_te) - y_te) ** 2)))

    gamma = _median_heuristic_gamma(X_tr, rng)
    preds = np.column_stack([
        SVR(kernel="rbf", C=SVR_C, epsilon=SVR_EPSILON, gamma=gamma)
        .fit(X_tr, y_tr[:, dim]).predict(X_te)
        for dim in range(y.shape[1])])
    rmse["rbf-svr"] = float(np.sqrt(np.mean((preds - y_te) ** 2)))
    return ProbeResult(rmse=rmse, n_train=len(train_idx), n_test=len(test_idx))


def _psd_check(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.min() < -1e-10:
        raise ValueError(f"{name} must be positive semi-definite")
    return cov


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric matrix square root via eigendecomposition, eigenvalues clipped at 0."""
    w, v = np.linalg.eigh(cov)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def wasserstein_gaussian(mean1, cov1, mean2, cov2) -> float:
    """2-Wasserstein distance between two Gaussians (Bures metric form)."""
    mean1, mean2 = np.asarray(mean1, dtype=float), np.asarray(mean2, dtype=float)
    cov1 = _psd_check(cov1, "cov1")
    cov2 = _psd_check(cov2, "cov2")
    root1 = _psd_sqrt(cov1)
    cross = _psd_sqrt(root1 @ cov2 @ root1)
    inner = np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross)
    total = float((mean1 - mean2) @ (mean1 - mean2)) + max(inner, 0.0)
    return float(np.sqrt(max(total, 0.0)))


def mean_policy_distance(heads_per_task: list[list[GaussianPolicyHead]],
                         action_dim: int = envs.ACTION_DIM) -> float:
    """Average pairwise W2 between per-task policies, normalized by k * n^2.

    `heads_per_task[i][p]` is task i's Gaussian head at shared probe state p;
    each pair's distance is the mean over probe states. Diagonal (i = j)
    terms contribute zero but count in the normalization.
    """
    n = len(heads_per_task)
    if n == 0:
        raise ValueError("need at least one task")
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            pair = np.mean([
                wasserstein_gaussian(hi.mean, hi.covariance, hj.mean, hj.covariance)
                for hi, hj in zip(heads_per_task[i], heads_per_task[j])])
            total += pair
    return total / (action_dim * n * n)


def expert_heads_on_probe_states(tasks: list[TaskSpec], probe_states: np.ndarray,
                                 noise_scale: float = 0.1) -> list[list[GaussianPolicyHead]]:
    """Scripted-expert heads for every task evaluated on a shared state set."""
    heads = []
    for task in tasks:
        row = []
        for vec in probe_states:
            state = envs.EnvState(position=vec[:2], velocity=vec[2:], step_index=0)
            row.append(envs.expert_policy(state, task, noise_scale))
        heads.append(row)
    return heads


def sample_probe_states(datasets: dict[int, TaskDataset], count: int = DEFAULT_PROBE_STATES,
                        seed: int = 0) -> np.ndarray:
    """States pooled uniformly over all task datasets."""
    rng = np.random.default_rng(seed)
    pools = np.concatenate([ds.states for ds in datasets.values()])
    idx = rng.choice(pools.shape[0], size=count, replace=False)
    return pools[idx].astype(float)


def policy_distance_report(tasks: list[TaskSpec], datasets: dict[int, TaskDataset],
                           noise_scale: float = 0.1,
                           n_probe_states: int = DEFAULT_PROBE_STATES,
                           seed: int = 0) -> PolicyDistanceReport:
    """Pairwise behavior-policy distances plus their correlation with label gaps."""
    tasks = sorted(tasks, key=lambda t: t.task_id)
    probe_states = sample_probe_states(datasets, n_probe_states, seed)
    heads = expert_heads_on_probe_states(tasks, probe_states, noise_scale)
    n = len(tasks)
    pairwise = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            pair = np.mean([
                wasserstein_gaussian(hi.mean, hi.covariance, hj.mean, hj.covariance)
                for hi, hj in zip(heads[i], heads[j])])
            pairwise[i, j] = pairwise[j, i] = pair
    d = pairwise.sum() / (envs.ACTION_DIM * n * n)

    labels = [envs.goal_label(t) for t in tasks]
    iu, ju = np.triu_indices(n, k=1)
    w2_pairs = pairwise[iu, ju]
    label_pairs = np.array([np.linalg.norm(labels[i] - labels[j])
                            for i, j in zip(iu, ju)])
    if len(w2_pairs) >= 3 and np.std(w2_pairs) > 0 and np.std(label_pairs) > 0:
        rho, p = pearson(label_pairs, w2_pairs)
    else:
        rho, p = float("nan"), float("nan")
    return PolicyDistanceReport(task_ids=[t.task_id for t in tasks],
                                pairwise=pairwise, mean_distance=float(d),
                                pearson_rho=rho, pearson_p=p)


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson correlation with a two-sided Student-t p-value."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    n = xs.shape[0]
    if n < 3:
        raise ValueError("pearson needs at least 3 points")
    if np.std(xs) == 0 or np.std(ys) == 0:
        raise ValueError("inputs must have nonzero variance")
    xc, yc = xs - xs.mean(), ys - ys.mean()
    rho = float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho ** 2))
    p = 2.0 * stats.t.sf(abs(t), df=n - 2)
    return rho, float(p)


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    a, b = np.asarray(sample_a, dtype=float), np.asarray(sample_b, dtype=float)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.shape[0], b.shape[0]
    se2 = va / na + vb / nb
    diff = a.mean() - b.mean()
    if se2 == 0:
        return (0.0, 1.0) if diff == 0 else (float("inf"), 0.0)
    t = diff / np.sqrt(se2)
    dof = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * stats.t.sf(abs(t), df=dof)
    return float(t), float(p)


def export_latents(encoder, tasks: list[TaskSpec], datasets: dict[int, TaskDataset],
                   path, samples_per_task: int = DEFAULT_EXPORT_SAMPLES,
                   seed: int = 0) -> Path:
    """Write per-transition latents with task ids and goal labels to CSV."""
    path = Path(path)
    rng = np.random.default_rng(seed)
    tasks = sorted(tasks, key=lambda t: t.task_id)
    label_dim = envs.goal_label(tasks[0]).shape[0]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        latent_dim = None
        header_written = False
        for task in tasks:
            ds = datasets[task.task_id]
            idx = rng.integers(0, ds.size, size=samples_per_task)
            z = _embed(encoder, ds.transitions[idx])
            if not header_written:
                latent_dim = z.shape[1]
                writer.writerow(["task_id"]
                                + [f"label_{k}" for k in range(label_dim)]
                                + [f"z_{k}" for k in range(latent_dim)])
                header_written = True
            label = envs.goal_label(task)
            for row in z:
                writer.writerow([task.task_id] + [repr(float(v)) for v in label]
                                + [repr(float(v)) for v in row])
    return path


def write_json_report(payload: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
