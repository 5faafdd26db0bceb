import numpy as np
import pytest
import torch
import yaml

from conftest import tiny_config
from omrl import data, envs, training
from omrl.training import (CheckpointError, ConfigError, TrainConfig,
                           TrainingDivergedError, config_from_dict,
                           init_train_state, load_checkpoint, load_config,
                           save_checkpoint, train, train_step)


def flat_params(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class TestConfig:
    def test_defaults_match_contract(self, tiny_dataset_dir):
        cfg = TrainConfig(family="point-dir", data_dir=str(tiny_dataset_dir))
        assert cfg.meta_batch == 16
        assert cfg.batch_size == 256
        assert cfg.context_size == 256
        assert cfg.gan_updates_per_step == 5
        assert cfg.lambda_dml == 0.5
        assert cfg.alpha == 50.0
        assert cfg.gamma == 0.99
        assert cfg.tau == 0.005
        assert cfg.lr_encoder == cfg.lr_actor == cfg.lr_critic == cfg.lr_gan == 3e-4
        assert (cfg.tasks_train, cfg.tasks_id, cfg.tasks_ood) == (20, 10, 10)

    def test_latent_dim_family_defaults(self):
        assert TrainConfig(family="point-dir", data_dir="x").latent_dim == 20
        assert TrainConfig(family="point-goal", data_dir="x").latent_dim == 20
        assert TrainConfig(family="point-mass", data_dir="x").latent_dim == 40
        assert TrainConfig(family="point-friction", data_dir="x").latent_dim == 40

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"family": "point-dir", "data_dir": "x",
                              "learning_rate": 1e-3})

    def test_missing_required_keys_rejected(self):
        with pytest.raises(ConfigError, match="missing required"):
            config_from_dict({"meta_batch": 4})

    def test_file_round_trip(self, tmp_path, tiny_dataset_dir):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({
            "family": "point-dir", "data_dir": str(tiny_dataset_dir),
            "meta_batch": 4, "total_steps": 3, "mi_enabled": False}))
        cfg = load_config(path)
        assert cfg.meta_batch == 4
        assert cfg.mi_enabled is False

    def test_nested_values_rejected(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("family: point-dir\ndata_dir: x\nnets: {width: 3}\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            TrainConfig(family="nope", data_dir="x")
        with pytest.raises(ConfigError):
            TrainConfig(family="point-dir", data_dir="x", meta_batch=0)
        with pytest.raises(ConfigError):
            TrainConfig(family="point-dir", data_dir="x", lambda_dml=-1.0)


class TestTrainStep:
    def test_gan_counter_advances_by_configured_updates(self, tiny_dataset_dir,
                                                        tiny_datasets):
        cfg = tiny_config(tiny_dataset_dir, gan_updates_per_step=5)
        state = init_train_state(cfg)
        train_datasets = {t: d for t, d in tiny_datasets.items()
                          if d.task.split == "train"}
        train_step(state, train_datasets)
        assert state.gan_update_count == 5
        train_step(state, train_datasets)
        assert state.gan_update_count == 10

    def test_first_step_metrics_finite(self, tiny_dataset_dir, tiny_datasets):
        cfg = tiny_config(tiny_dataset_dir)
        state = init_train_state(cfg)
        train_datasets = {t: d for t, d in tiny_datasets.items()
                          if d.task.split == "train"}
        metrics = train_step(state, train_datasets)
        for name in ("loss_mi", "loss_dml", "loss_disc", "loss_gen",
                     "loss_critic", "loss_actor", "entropy"):
            assert np.isfinite(metrics[name]), name

    def test_nan_aborts_with_loss_name(self, tiny_dataset_dir, tiny_datasets):
        cfg = tiny_config(tiny_dataset_dir)
        state = init_train_state(cfg)
        with torch.no_grad():
            for p in state.critic.parameters():
                p.fill_(float("nan"))
        train_datasets = {t: d for t, d in tiny_datasets.items()
                          if d.task.split == "train"}
        with pytest.raises(TrainingDivergedError, match="loss_"):
            train_step(state, train_datasets)

    def test_encoder_untouched_with_zero_encoder_lr(self, tiny_dataset_dir,
                                                    tiny_datasets):
        # all other optimizers step normally; the encoder must not move at all
        cfg = tiny_config(tiny_dataset_dir, lr_encoder=0.0)
        state = init_train_state(cfg)
        train_datasets = {t: d for t, d in tiny_datasets.items()
                          if d.task.split == "train"}
        before = flat_params(state.encoder).clone()
        for _ in range(3):
            train_step(state, train_datasets)
        assert torch.equal(flat_params(state.encoder), before)
        # and the agent side did move
        assert not torch.equal(flat_params(state.critic), flat_params(state.target_critic))

    def test_rl_losses_send_no_gradient_to_encoder(self, tiny_dataset_dir,
                                                   tiny_datasets):
        cfg = tiny_config(tiny_dataset_dir)
        state = init_train_state(cfg)
        train_datasets = {t: d for t, d in tiny_datasets.items()
                          if d.task.split == "train"}
        train_step(state, train_datasets)
        before = flat_params(state.encoder).clone()
        # a second step with encoder lr zeroed: gradients may exist, the
        # parameters must not change
        for group in state.optimizers["encoder"].param_groups:
            group["lr"] = 0.0
        train_step(state, train_datasets)
        assert torch.equal(flat_params(state.encoder), before)


class TestTrainLoop:
    def test_zero_steps_returns_initial_state_and_empty_log(self, tiny_dataset_dir,
                                                            tmp_path):
        cfg = tiny_config(tiny_dataset_dir, total_steps=0)
        state, log = train(cfg, tmp_path / "run")
        assert state.step == 0
        assert log == []

    def test_missing_dataset_is_startup_error(self, tmp_path):
        cfg = tiny_config(tmp_path / "nowhere")
        with pytest.raises(data.DatasetError):
            train(cfg, tmp_path / "run")

    def test_metric_trace_deterministic(self, tiny_dataset_dir, tmp_path):
        cfg = tiny_config(tiny_dataset_dir, total_steps=5)
        _, log_a = train(cfg, tmp_path / "a")
        _, log_b = train(cfg, tmp_path / "b")
        assert log_a == log_b
        csv_a = (tmp_path / "a" / "train_metrics.csv").read_bytes()
        csv_b = (tmp_path / "b" / "train_metrics.csv").read_bytes()
        assert csv_a == csv_b

    def test_seed_changes_trace(self, tiny_dataset_dir, tmp_path):
        cfg_a = tiny_config(tiny_dataset_dir, total_steps=3, seed=1)
        cfg_b = tiny_config(tiny_dataset_dir, total_steps=3, seed=2)
        _, log_a = train(cfg_a, tmp_path / "a")
        _, log_b = train(cfg_b, tmp_path / "b")
        assert log_a != log_b

    def test_paper_scale_constants(self):
        assert training.PAPER_SCALE_STEPS == 100_000
        assert training.PAPER_SCALE_TRANSITIONS == 180_000


class TestCheckpoint:
    def test_round_trip_parameters_exact(self, tiny_dataset_dir, tmp_path):
        cfg = tiny_config(tiny_dataset_dir, total_steps=2)
        state, _ = train(cfg, tmp_path / "run")
        path = tmp_path / "ckpt.pt"
        save_checkpoint(state, path)
        restored = load_checkpoint(path)
        assert restored.step == state.step
        assert restored.gan_update_count == state.gan_update_count
        for name, net in state.models().items():
            assert torch.equal(flat_params(net), flat_params(restored.models()[name])), name

    def test_version_mismatch_rejected(self, tiny_dataset_dir, tmp_path):
        cfg = tiny_config(tiny_dataset_dir, total_steps=1)
        state, _ = train(cfg, tmp_path / "run")
        path = tmp_path / "ckpt.pt"
        payload = torch.load(tmp_path / "run" / "checkpoint.pt", weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_tensors_rejected(self, tiny_dataset_dir, tmp_path):
        cfg = tiny_config(tiny_dataset_dir, total_steps=1)
        train(cfg, tmp_path / "run")
        payload = torch.load(tmp_path / "run" / "checkpoint.pt", weights_only=False)
        del payload["models"]["actor"]
        path = tmp_path / "broken.pt"
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="actor"):
            load_checkpoint(path)

    def test_interrupt_resume_bit_exact_trace(self, tiny_dataset_dir, tmp_path):
        # 10 uninterrupted steps vs 5 + checkpoint + 5 resumed steps
        cfg = tiny_config(tiny_dataset_dir, total_steps=10)
        _, log_full = train(cfg, tmp_path / "full")

        cfg_half = tiny_config(tiny_dataset_dir, total_steps=5)
        state_half, log_half = train(cfg_half, tmp_path / "half")
        cfg_rest = tiny_config(tiny_dataset_dir, total_steps=10)
        _, log_rest = train(cfg_rest, tmp_path / "half",
                            resume_from=tmp_path / "half" / "checkpoint.pt")
        combined = log_half + log_rest
        assert [row["step"] for row in combined] == list(range(1, 11))
        for full_row, resumed_row in zip(log_full, combined):
            assert full_row == resumed_row
        csv_full = (tmp_path / "full" / "train_metrics.csv").read_text()
        csv_resumed = (tmp_path / "half" / "train_metrics.csv").read_text()
        assert csv_full == csv_resumed

    def test_resume_keeps_step_indices_monotone(self, tiny_dataset_dir, tmp_path):
        cfg = tiny_config(tiny_dataset_dir, total_steps=4)
        train(cfg, tmp_path / "run")
        cfg_more = tiny_config(tiny_dataset_dir, total_steps=8)
        _, log = train(cfg_more, tmp_path / "run",
                       resume_from=tmp_path / "run" / "checkpoint.pt")
        assert [row["step"] for row in log] == [5, 6, 7, 8]


class TestSmokeTraining:
    def test_dml_decreases_on_toy_run(self, tmp_path):
        # 500 steps on a 2-task toy problem, 3 seeds: the distance-metric loss
        # averaged over the last 20 steps must undercut the first 20 steps
        ds_dir = tmp_path / "toy"
        tasks = envs.sample_task_set("point-dir", "train", 2, 31)
        data.generate_dataset(tasks, 600, ds_dir, seed=31)
        for seed in (0, 1, 2):
            cfg = training.TrainConfig(
                family="point-dir", data_dir=str(ds_dir), tasks_train=2,
                tasks_id=1, tasks_ood=1, meta_batch=2, batch_size=16,
                context_size=8, gan_updates_per_step=1, total_steps=500,
                eval_every=0, seed=seed)
            _, log = train(cfg, tmp_path / f"run{seed}")
            first = np.mean([row["loss_dml"] for row in log[:20]])
            last = np.mean([row["loss_dml"] for row in log[-20:]])
            assert last < first, f"seed {seed}: {last} !< {first}"


@pytest.mark.slow
class TestSoak:
    def test_losses_finite_over_1000_steps_10_seeds(self, tmp_path):
        ds_dir = tmp_path / "soak"
        tasks = envs.sample_task_set("point-dir", "train", 2, 77)
        data.generate_dataset(tasks, 300, ds_dir, seed=77)
        for seed in range(10):
            cfg = training.TrainConfig(
                family="point-dir", data_dir=str(ds_dir), tasks_train=2,
                tasks_id=1, tasks_ood=1, meta_batch=2, batch_size=8,
                context_size=4, gan_updates_per_step=1, total_steps=1000,
                eval_every=0, seed=seed)
            _, log = train(cfg, tmp_path / f"soak{seed}")
            for row in log:
                assert all(np.isfinite(v) for v in row.values())
