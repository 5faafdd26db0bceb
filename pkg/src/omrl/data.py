"""Offline dataset generation, bit-exact persistence, and mini-batch sampling.

On-disk layout is one directory per run: a UTF-8 `manifest.json` plus one
binary file per task of little-endian float32 rows. Row layout is
[state(4) | action(2) | reward(1) | next_state(4) | done(1 as 0.0/1.0)],
stride 48 bytes. The manifest schema and the row stride are normative.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envs
from .envs import GaussianPolicyHead, TaskSpec

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ROW_DTYPE = np.dtype("<f4")
ROW_FLOATS = 12
ROW_STRIDE = ROW_FLOATS * ROW_DTYPE.itemsize  # 48 bytes

DEFAULT_NOISE_MIX = (0.1, 0.3, 0.5)
ANCHOR_EPISODES = 20
ANCHOR_EXPERT_NOISE = 0.1

# Column slices of a row.
STATE = slice(0, 4)
ACTION = slice(4, 6)
REWARD = 6
NEXT_STATE = slice(7, 11)
DONE = 11


class DatasetError(Exception):
    """Base class for dataset persistence failures."""


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetRowCountError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


@dataclass
class TaskDataset:
    """Offline transitions for one task plus its return-normalization anchors."""

    task: TaskSpec
    transitions: np.ndarray  # (n, 12) float32 row table
    behavior_heads: list[GaussianPolicyHead]
    random_return: float
    expert_return: float

    @property
    def size(self) -> int:
        return self.transitions.shape[0]

    @property
    def states(self) -> np.ndarray:
        return self.transitions[:, STATE]

    @property
    def actions(self) -> np.ndarray:
        return self.transitions[:, ACTION]

    @property
    def rewards(self) -> np.ndarray:
        return self.transitions[:, REWARD]

    @property
    def next_states(self) -> np.ndarray:
        return self.transitions[:, NEXT_STATE]

    @property
    def dones(self) -> np.ndarray:
        return self.transitions[:, DONE]


@dataclass(frozen=True)
class ContextBatch:
    """H transitions sampled from one task's dataset (not necessarily sequential)."""

    transitions: np.ndarray  # (H, 12)
    task_id: int


@dataclass
class DatasetManifest:
    format_version: int
    family: str
    dtype: str
    seed: int
    episode_length: int
    noise_mix: list[float]
    tasks: list[dict]  # per-task metadata entries

    def entry(self, task_id: int) -> dict:
        for entry in self.tasks:
            if entry["task_id"] == task_id:
                return entry
        raise KeyError(f"task {task_id} not in manifest")

    @property
    def task_ids(self) -> list[int]:
        return [entry["task_id"] for entry in self.tasks]

    def ids_for_split(self, split: str) -> list[int]:
        return [e["task_id"] for e in self.tasks if e["split"] == split]


def _task_filename(task_id: int) -> str:
    return f"task_{task_id:05d}.bin"


def _rollout_rows(task: TaskSpec, noise_scale: float, count: int,
                  rng: np.random.Generator, episode_length: int) -> np.ndarray:
    rows = []
    while sum(r.shape[0] for r in rows) < count:
        episode = envs.rollout_episode(
            task, envs.expert_action_fn(task, noise_scale, rng), rng, episode_length)
        rows.append(np.stack([t.as_row() for t in episode]))
    return np.concatenate(rows)[:count]


def _estimate_anchors(task: TaskSpec, seed: int, episode_length: int) -> tuple[float, float]:
    rand_rng = np.random.default_rng([seed, task.task_id, 1])
    random_return = envs.mean_return(
        task, envs.random_action_fn, ANCHOR_EPISODES, rand_rng, episode_length)
    exp_rng = np.random.default_rng([seed, task.task_id, 2])
    expert_return = envs.mean_return(
        task, lambda rng: envs.expert_action_fn(task, ANCHOR_EXPERT_NOISE, rng),
        ANCHOR_EPISODES, exp_rng, episode_length)
    return random_return, expert_return


def generate_task_dataset(task: TaskSpec, transitions_per_task: int, noise_mix,
                          seed: int, episode_length: int) -> TaskDataset:
    """Roll out the scripted expert at each noise scale for an equal share of rows."""
    if transitions_per_task < episode_length:
        raise ValueError("transitions_per_task must be >= episode_length")
    shares = [transitions_per_task // len(noise_mix)] * len(noise_mix)
    shares[-1] += transitions_per_task - sum(shares)

    rng = np.random.default_rng([seed, task.task_id, 0])
    blocks, heads = [], []
    for noise_scale, share in zip(noise_mix, shares):
        rows = _rollout_rows(task, noise_scale, share, rng, episode_length)
        blocks.append(rows)
        heads.append(GaussianPolicyHead(
            mean=rows[:, ACTION].mean(axis=0),
            covariance=noise_scale ** 2 * np.eye(envs.ACTION_DIM)))
    table = np.concatenate(blocks).astype(ROW_DTYPE)

    random_return, expert_return = _estimate_anchors(task, seed, episode_length)
    if not random_return < expert_return:
        raise ValueError(
            f"task {task.task_id}: random return {random_return:.3f} not below "
            f"expert return {expert_return:.3f}")
    return TaskDataset(task=task, transitions=table, behavior_heads=heads,
                       random_return=random_return, expert_return=expert_return)


def _head_to_json(head: GaussianPolicyHead, noise_scale: float) -> dict:
    return {"noise_scale": noise_scale,
            "mean": [float(m) for m in head.mean],
            "cov_diag": [float(v) for v in np.diag(head.covariance)]}


def _head_from_json(entry: dict) -> GaussianPolicyHead:
    return GaussianPolicyHead(mean=np.array(entry["mean"]),
                              covariance=np.diag(entry["cov_diag"]))


def generate_dataset(tasks: list[TaskSpec], transitions_per_task: int,
                     out_dir, noise_mix=DEFAULT_NOISE_MIX, seed: int = 0,
                     episode_length: int = envs.DEFAULT_EPISODE_LENGTH) -> DatasetManifest:
    """Generate and persist per-task datasets; returns the written manifest."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {out_dir}: {exc}") from exc
    families = {t.family for t in tasks}
    if len(families) != 1:
        raise ValueError("all tasks in one dataset must share a family")

    entries = []
    for task in tasks:
        ds = generate_task_dataset(task, transitions_per_task, noise_mix, seed,
                                   episode_length)
        payload = ds.transitions.tobytes()
        filename = _task_filename(task.task_id)
        (out_dir / filename).write_bytes(payload)
        entries.append({
            "task_id": task.task_id,
            "split": task.split,
            "goal_params": list(task.goal_params),
            "mass_scale": task.mass_scale,
            "friction_scale": task.friction_scale,
            "discount": task.discount,
            "rows": ds.size,
            "random_return": ds.random_return,
            "expert_return": ds.expert_return,
            "behavior_heads": [_head_to_json(h, n) for h, n in
                               zip(ds.behavior_heads, noise_mix)],
            "file": filename,
            "sha256": hashlib.sha256(payload).hexdigest(),
        })
        logger.info("generated task %d (%s/%s): %d rows, anchors [%.2f, %.2f]",
                    task.task_id, task.family, task.split, ds.size,
                    ds.random_return, ds.expert_return)

    manifest = DatasetManifest(
        format_version=FORMAT_VERSION, family=tasks[0].family, dtype=ROW_DTYPE.str,
        seed=seed, episode_length=episode_length, noise_mix=list(noise_mix),
        tasks=entries)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.__dict__, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest_file = path / "manifest.json" if path.is_dir() else path
    if not manifest_file.exists():
        raise DatasetError(f"no manifest at {manifest_file}")
    raw = json.loads(manifest_file.read_text(encoding="utf-8"))
    if raw.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"unsupported dataset format version {raw.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}")
    return DatasetManifest(**raw)


def _task_from_entry(family: str, entry: dict) -> TaskSpec:
    return TaskSpec(family=family, goal_params=tuple(entry["goal_params"]),
                    mass_scale=entry["mass_scale"],
                    friction_scale=entry["friction_scale"],
                    discount=entry["discount"], split=entry["split"],
                    task_id=entry["task_id"])


def load_task_dataset(dir_path, manifest: DatasetManifest, task_id: int,
                      verify_checksum: bool = True) -> TaskDataset:
    """Load one task's rows, enforcing stride, row-count, and checksum invariants."""
    dir_path = Path(dir_path)
    entry = manifest.entry(task_id)
    file_path = dir_path / entry["file"]
    if not file_path.exists():
        raise DatasetError(f"missing task file {file_path}")
    payload = file_path.read_bytes()
    if len(payload) % ROW_STRIDE != 0:
        raise DatasetTruncatedError(
            f"task file {entry['file']} truncated mid-row: {len(payload)} bytes "
            f"is not a multiple of the {ROW_STRIDE}-byte row stride")
    rows_on_disk = len(payload) // ROW_STRIDE
    if rows_on_disk != entry["rows"]:
        raise DatasetRowCountError(
            f"row count mismatch for task file {entry['file']}: manifest declares "
            f"{entry['rows']} rows, file holds {rows_on_disk}")
    if verify_checksum:
        digest = hashlib.sha256(payload).hexdigest()
        if digest != entry["sha256"]:
            raise DatasetChecksumError(
                f"checksum failure for task file {entry['file']}")
    table = np.frombuffer(payload, dtype=ROW_DTYPE).reshape(-1, ROW_FLOATS).copy()
    return TaskDataset(
        task=_task_from_entry(manifest.family, entry),
        transitions=table,
        behavior_heads=[_head_from_json(h) for h in entry["behavior_heads"]],
        random_return=entry["random_return"],
        expert_return=entry["expert_return"])


def load_dataset(dir_path, split: str | None = None) -> dict[int, TaskDataset]:
    """Load every task dataset in a run directory (optionally one split)."""
    manifest = load_manifest(dir_path)
    ids = manifest.task_ids if split is None else manifest.ids_for_split(split)
    return {tid: load_task_dataset(dir_path, manifest, tid) for tid in ids}


def sample_context(dataset: TaskDataset, H: int, rng: np.random.Generator) -> ContextBatch:
    """H rows drawn uniformly with replacement."""
    if H < 1:
        raise ValueError("context size H must be >= 1")
    idx = rng.integers(0, dataset.size, size=H)
    return ContextBatch(transitions=dataset.transitions[idx],
                        task_id=dataset.task.task_id)


def sample_training_batch(dataset: TaskDataset, batch_size: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Uniform-with-replacement rows for the RL losses."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(0, dataset.size, size=batch_size)
    return dataset.transitions[idx]
