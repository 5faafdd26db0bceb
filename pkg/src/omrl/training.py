"""Meta-training loop, configuration, checkpointing, and metric logs.

One training step processes a meta-batch of tasks: sample two contexts and a
training batch per task, encode task representations, run the inner GAN
updates on detached representations, then update the encoder (entropy
regularizer + distance-metric loss), the critic, the behavior model, and the
actor, followed by the EMA target update. Encoder parameters receive
gradients only from the encoder objective.

All stochasticity flows through explicitly held numpy/torch generators, so a
checkpoint restores training bit-exactly on the same platform.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as data_mod
from . import envs, evaluation, gan
from .agent import (Actor, AgentConfig, BehaviorModel, Critic, actor_loss,
                    behavior_nll, critic_loss, ema_update)
from .data import DatasetManifest, TaskDataset, load_manifest, load_task_dataset
from .encoder import ContextEncoder, EncoderLossConfig, dml_loss, encoder_loss
from .gan import (Discriminator, Generator, discriminator_loss, entropy_estimate,
                  generator_loss, mi_loss, sample_covariance)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TRAIN_CSV_COLUMNS = ("step", "loss_mi", "loss_dml", "loss_disc", "loss_gen",
                     "loss_critic", "loss_actor", "loss_behavior", "entropy")
PAPER_SCALE_STEPS = 100_000
PAPER_SCALE_TRANSITIONS = 180_000


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration input."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be restored."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss turns non-finite."""


def default_latent_dim(family: str) -> int:
    return 40 if family in envs.DYNAMICS_FAMILIES else 20


@dataclass
class TrainConfig:
    family: str
    data_dir: str
    tasks_train: int = 20
    tasks_id: int = 10
    tasks_ood: int = 10
    meta_batch: int = 16
    batch_size: int = 256
    context_size: int = 256
    latent_dim: int = 0  # 0 resolves to the family default (20 / 40)
    gan_updates_per_step: int = 5
    lambda_dml: float = 0.5
    lr_encoder: float = 3e-4
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_gan: float = 3e-4
    alpha: float = 50.0
    gamma: float = 0.99
    tau: float = 0.005
    total_steps: int = 5000
    eval_every: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    mi_enabled: bool = True

    def __post_init__(self):
        if self.family not in envs.FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        for name in ("tasks_train", "tasks_id", "tasks_ood", "meta_batch",
                     "batch_size", "context_size", "gan_updates_per_step",
                     "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lambda_dml < 0:
            raise ConfigError("lambda_dml must be >= 0")
        if self.total_steps < 0 or self.eval_every < 0:
            raise ConfigError("step counts must be >= 0")
        if self.latent_dim == 0:
            self.latent_dim = default_latent_dim(self.family)

    def encoder_loss_config(self) -> EncoderLossConfig:
        return EncoderLossConfig(lambda_dml=self.lambda_dml,
                                 mi_enabled=self.mi_enabled)

    def agent_config(self) -> AgentConfig:
        return AgentConfig(alpha=self.alpha, gamma=self.gamma, tau=self.tau)


def config_from_dict(values: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = {"family", "data_dir"} - set(values)
    if missing:
        raise ConfigError(f"missing required config keys: {sorted(missing)}")
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    """Parse a flat key-value config file (YAML mapping of scalars)."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ConfigError("config file must be a flat key: value mapping")
    for key, value in raw.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"config key {key!r} must be a scalar")
    return config_from_dict(raw)


@dataclass
class TrainState:
    """All learnable components, optimizer states, counters, and rng streams."""

    config: TrainConfig
    encoder: ContextEncoder
    generator: Generator
    discriminator: Discriminator
    critic: Critic
    target_critic: Critic
    actor: Actor
    behavior: BehaviorModel
    optimizers: dict[str, torch.optim.Optimizer]
    torch_gen: torch.Generator
    task_rng: np.random.Generator
    context_rng: np.random.Generator
    batch_rng: np.random.Generator
    step: int = 0
    gan_update_count: int = 0

    def models(self) -> dict[str, torch.nn.Module]:
        return {"encoder": self.encoder, "generator": self.generator,
                "discriminator": self.discriminator, "critic": self.critic,
                "target_critic": self.target_critic, "actor": self.actor,
                "behavior": self.behavior}


def init_train_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    d = config.latent_dim
    encoder = ContextEncoder(latent_dim=d)
    generator = Generator(latent_dim=d)
    discriminator = Discriminator(latent_dim=d)
    critic = Critic(latent_dim=d)
    target_critic = Critic(latent_dim=d)
    target_critic.load_state_dict(critic.state_dict())
    for p in target_critic.parameters():
        p.requires_grad_(False)
    actor = Actor(latent_dim=d)
    behavior = BehaviorModel(latent_dim=d)
    optimizers = {
        "encoder": torch.optim.Adam(encoder.parameters(), lr=config.lr_encoder),
        "generator": torch.optim.Adam(generator.parameters(), lr=config.lr_gan),
        "discriminator": torch.optim.Adam(discriminator.parameters(), lr=config.lr_gan),
        "critic": torch.optim.Adam(critic.parameters(), lr=config.lr_critic),
        "actor": torch.optim.Adam(actor.parameters(), lr=config.lr_actor),
        "behavior": torch.optim.Adam(behavior.parameters(), lr=config.lr_actor),
    }
    torch_gen = torch.Generator().manual_seed(config.seed)
    return TrainState(
        config=config, encoder=encoder, generator=generator,
        discriminator=discriminator, critic=critic, target_critic=target_critic,
        actor=actor, behavior=behavior, optimizers=optimizers, torch_gen=torch_gen,
        task_rng=np.random.default_rng([config.seed, 0]),
        context_rng=np.random.default_rng([config.seed, 1]),
        batch_rng=np.random.default_rng([config.seed, 2]))


def _batch_tensors(batches: np.ndarray):
    """Split a (M, B, 12) row stack into flat float32 tensors."""
    flat = torch.as_tensor(batches.reshape(-1, data_mod.ROW_FLOATS), dtype=torch.float32)
    return (flat[:, data_mod.STATE], flat[:, data_mod.ACTION],
            flat[:, data_mod.REWARD], flat[:, data_mod.NEXT_STATE],
            flat[:, data_mod.DONE])


def train_step(state: TrainState, datasets: dict[int, TaskDataset]) -> dict[str, float]:
    """One meta-training step over a sampled meta-batch of tasks."""
    config = state.config
    enc_cfg = config.encoder_loss_config()
    agent_cfg = config.agent_config()
    ids = sorted(datasets)
    replace = config.meta_batch > len(ids)
    chosen = state.task_rng.choice(ids, size=config.meta_batch, replace=replace)
    M, B, H = config.meta_batch, config.batch_size, config.context_size

    ctx_a, ctx_b, batches = [], [], []
    for tid in chosen:
        ds = datasets[int(tid)]
        ctx_a.append(data_mod.sample_context(ds, H, state.context_rng).transitions)
        ctx_b.append(data_mod.sample_context(ds, H, state.context_rng).transitions)
        batches.append(data_mod.sample_training_batch(ds, B, state.batch_rng))
    contexts = np.stack(ctx_a + ctx_b)          # (2M, H, 12)
    batches = np.stack(batches)                 # (M, B, 12)

    # One representation per context; first M rows condition the agent/GAN,
    # the second context per task supplies same-task distance-metric pairs.
    z_all = state.encoder.encode_context_batch(contexts)
    z_a = z_all[:M]
    states_t, actions_t, rewards_t, next_states_t, dones_t = _batch_tensors(batches)
    z_rows_const = z_a.detach().repeat_interleave(B, dim=0)

    # Inner adversarial updates on detached representations.
    opt_d, opt_g = state.optimizers["discriminator"], state.optimizers["generator"]
    loss_disc = loss_gen = torch.zeros(())
    for _ in range(config.gan_updates_per_step):
        noise = torch.randn((M * B, state.generator.noise_dim),
                            generator=state.torch_gen)
        fake = state.generator(states_t, z_rows_const, noise)
        loss_disc = discriminator_loss(state.discriminator, actions_t,
                                       fake.detach(), states_t, z_rows_const)
        opt_d.zero_grad()
        loss_disc.backward()
        opt_d.step()
        loss_gen = generator_loss(state.discriminator, fake, states_t, z_rows_const)
        opt_g.zero_grad()
        loss_gen.backward()
        opt_g.step()
        state.gan_update_count += 1

    # Entropy regularizer: regenerate actions with gradients flowing to the
    # encoder through z; one covariance per task.
    noise = torch.randn((M * B, state.generator.noise_dim), generator=state.torch_gen)
    fake = state.generator(states_t, z_a.repeat_interleave(B, dim=0), noise)
    fake_by_task = fake.view(M, B, envs.ACTION_DIM)
    mi_terms = [mi_loss(fake_by_task[i]) for i in range(M)]
    loss_mi = torch.stack(mi_terms).mean()
    with torch.no_grad():
        entropy = torch.stack([entropy_estimate(sample_covariance(fake_by_task[i]))
                               for i in range(M)]).mean()

    loss_dml = dml_loss(z_all, np.concatenate([chosen, chosen]), enc_cfg)
    loss_enc = encoder_loss(loss_mi, loss_dml, enc_cfg)
    state.optimizers["encoder"].zero_grad()
    loss_enc.backward()
    state.optimizers["encoder"].step()

    # Agent updates; z is a constant input from here on.
    loss_critic = critic_loss(state.critic, state.target_critic, state.actor,
                              states_t, actions_t, rewards_t, next_states_t,
                              dones_t, z_rows_const, agent_cfg,
                              generator=state.torch_gen)
    state.optimizers["critic"].zero_grad()
    loss_critic.backward()
    state.optimizers["critic"].step()

    loss_behavior = behavior_nll(state.behavior, states_t, z_rows_const, actions_t)
    state.optimizers["behavior"].zero_grad()
    loss_behavior.backward()
    state.optimizers["behavior"].step()

    loss_actor = actor_loss(state.critic, state.actor, state.behavior, states_t,
                            z_rows_const, agent_cfg, generator=state.torch_gen)
    state.optimizers["actor"].zero_grad()
    loss_actor.backward()
    state.optimizers["actor"].step()

    ema_update(state.target_critic, state.critic, config.tau)
    state.step += 1

    metrics = {"loss_mi": loss_mi, "loss_dml": loss_dml, "loss_disc": loss_disc,
               "loss_gen": loss_gen, "loss_critic": loss_critic,
               "loss_actor": loss_actor, "loss_behavior": loss_behavior,
               "entropy": entropy}
    metrics = {name: float(value.detach()) for name, value in metrics.items()}
    for name, value in metrics.items():
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite training loss: {name}")
    return metrics


def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "step": state.step,
        "gan_update_count": state.gan_update_count,
        "models": {name: net.state_dict() for name, net in state.models().items()},
        "optimizers": {name: opt.state_dict()
                       for name, opt in state.optimizers.items()},
        "torch_rng": state.torch_gen.get_state(),
        "numpy_rngs": {"task": state.task_rng.bit_generator.state,
                       "context": state.context_rng.bit_generator.state,
                       "batch": state.batch_rng.bit_generator.state},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('format_version')!r}")
    config = config_from_dict(payload["config"])
    state = init_train_state(config)
    for name, net in state.models().items():
        if name not in payload["models"]:
            raise CheckpointError(f"checkpoint missing tensors for {name!r}")
        try:
            net.load_state_dict(payload["models"][name])
        except RuntimeError as exc:
            raise CheckpointError(f"bad tensors for {name!r}: {exc}") from exc
    for name, opt in state.optimizers.items():
        opt.load_state_dict(payload["optimizers"][name])
    state.torch_gen.set_state(payload["torch_rng"])
    state.task_rng.bit_generator.state = payload["numpy_rngs"]["task"]
    state.context_rng.bit_generator.state = payload["numpy_rngs"]["context"]
    state.batch_rng.bit_generator.state = payload["numpy_rngs"]["batch"]
    state.step = payload["step"]
    state.gan_update_count = payload["gan_update_count"]
    return state


def _format_metric(value) -> str:
    return repr(float(value))


def _append_train_row(path: Path, step: int, metrics: dict[str, float]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(TRAIN_CSV_COLUMNS)
        writer.writerow([step] + [_format_metric(metrics[c])
                                  for c in TRAIN_CSV_COLUMNS[1:]])


def _append_eval_rows(path: Path, step: int, result: evaluation.EvalResult) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(("step",) + evaluation.EVAL_CSV_COLUMNS)
        for row in result.rows:
            writer.writerow([step, row["strategy"], row["split"], row["task_id"],
                             row["seed"], _format_metric(row["raw_return"]),
                             _format_metric(row["normalized_return"])])
        writer.writerow([step, result.strategy, result.split,
                         evaluation.AGGREGATE_TASK_ID, -1,
                         _format_metric(result.mean_raw),
                         _format_metric(result.mean_normalized)])


def load_run_datasets(config: TrainConfig):
    """Load the run directory's datasets keyed by split."""
    manifest = load_manifest(config.data_dir)
    if manifest.family != config.family:
        raise ConfigError(
            f"dataset family {manifest.family!r} does not match config "
            f"family {config.family!r}")
    by_split = {}
    for split in envs.SPLITS:
        ids = manifest.ids_for_split(split)
        by_split[split] = {tid: load_task_dataset(config.data_dir, manifest, tid)
                           for tid in ids}
    return manifest, by_split


def _eval_tasks(datasets: dict[int, TaskDataset]) -> list:
    return [ds.task for ds in datasets.values()]


def run_periodic_eval(state: TrainState, by_split, out_dir: Path) -> None:
    config = state.config
    eval_csv = out_dir / "eval_metrics.csv"
    for split in ("id-test", "ood-test"):
        datasets = by_split.get(split, {})
        if not datasets:
            continue
        for kind in ("offline", "online"):
            strategy = evaluation.ContextStrategy(kind=kind, H=config.context_size)
            result = evaluation.evaluate_suite(
                state.encoder, state.actor, _eval_tasks(datasets), datasets,
                strategy, episodes=config.eval_episodes, seeds=(config.seed,))
            _append_eval_rows(eval_csv, state.step, result)


def train(config: TrainConfig, out_dir, resume_from=None) -> tuple[TrainState, list[dict]]:
    """Run the meta-training loop; returns the final state and the metric rows.

    With `resume_from`, training continues from the checkpoint (its config,
    with `total_steps` taken from the passed config) and metric CSVs in
    `out_dir` are appended to, keeping step indices monotone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        state.config.total_steps = config.total_steps
        config = state.config
    else:
        state = init_train_state(config)
    manifest, by_split = load_run_datasets(config)
    train_datasets = by_split["train"]
    if not train_datasets:
        raise ConfigError(f"no train-split datasets in {config.data_dir}")

    train_csv = out_dir / "train_metrics.csv"
    log: list[dict] = []
    while state.step < config.total_steps:
        metrics = train_step(state, train_datasets)
        _append_train_row(train_csv, state.step, metrics)
        log.append({"step": state.step, **metrics})
        if config.eval_every > 0 and state.step % config.eval_every == 0:
            run_periodic_eval(state, by_split, out_dir)
            save_checkpoint(state, out_dir / "checkpoint.pt")
        if state.step % 100 == 0:
            logger.info("step %d: %s", state.step,
                        {k: round(v, 4) for k, v in metrics.items()})
    save_checkpoint(state, out_dir / "checkpoint.pt")
    return state, log
