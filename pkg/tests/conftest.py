import numpy as np
import pytest

from omrl import data, envs, training

POINT_DIR_SEED = 7


def make_task_suite(family="point-dir", n_train=3, n_id=2, n_ood=2, seed=POINT_DIR_SEED):
    tasks = envs.sample_task_set(family, "train", n_train, seed)
    tasks += envs.sample_task_set(family, "id-test", n_id, seed, id_start=n_train)
    tasks += envs.sample_task_set(family, "ood-test", n_ood, seed,
                                  id_start=n_train + n_id)
    return tasks


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """Small point-dir run directory shared across tests (3/2/2 tasks)."""
    out = tmp_path_factory.mktemp("tiny-ds")
    tasks = make_task_suite()
    data.generate_dataset(tasks, 1500, out, seed=3)
    return out


@pytest.fixture(scope="session")
def tiny_datasets(tiny_dataset_dir):
    return data.load_dataset(tiny_dataset_dir)


def tiny_config(data_dir, **overrides):
    base = dict(family="point-dir", data_dir=str(data_dir), tasks_train=3,
                tasks_id=2, tasks_ood=2, meta_batch=3, batch_size=32,
                context_size=16, gan_updates_per_step=2, total_steps=10,
                eval_every=0, eval_episodes=2, seed=1)
    base.update(overrides)
    return training.TrainConfig(**base)


@pytest.fixture(scope="session")
def small_trained_run(tmp_path_factory):
    """A modest trained run on point-dir used by representation-quality tests."""
    out = tmp_path_factory.mktemp("small-run")
    ds_dir = out / "data"
    tasks = make_task_suite(n_train=4, n_id=2, n_ood=2, seed=11)
    data.generate_dataset(tasks, 6000, ds_dir, seed=11)
    config = training.TrainConfig(
        family="point-dir", data_dir=str(ds_dir), tasks_train=4, tasks_id=2,
        tasks_ood=2, meta_batch=4, batch_size=64, context_size=32,
        gan_updates_per_step=3, total_steps=800, eval_every=0, seed=5)
    state, _ = training.train(config, out / "run")
    return state, ds_dir


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
