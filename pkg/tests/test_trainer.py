# tests/test_trainer.py
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

import jsonlines
import numpy as np
import pandas as pd

from atvc_lab import atvc, nn, trainer
from atvc_lab.atvc import ModelConfig
from atvc_lab.baselines import PolicyKind
from atvc_lab.env import EnvConfig
from atvc_lab.errors import CompatibilityError, ConfigurationError, ContractError, NumericError
from atvc_lab.serialization import save_checkpoint
from atvc_lab.trainer import (EpisodeStats, ExperimentConfig, PPOConfig, RunConfig, Trajectory, gae,
                              normalize_advantages, policy_loss, total_loss, update_kl_coeff, vae_loss,
                              value_loss)
from config_loader import load_config

REPO_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config.yaml")
SMALL_MODEL = ModelConfig(latent_dim=4, encoder_hidden=8, encoder_layers=2, head_hidden=8, attention_dim=4)


def small_run_config(**experiment):
    settings = {"seed": 17, "iterations": 2, "baseline_episodes": 2, "eval_episodes": 2, "checkpoint_every": 1}
    settings.update(experiment)
    return RunConfig(
        env=EnvConfig(episode_len=10, eta=1.2, seed=0),
        ppo=PPOConfig(train_batch=20, minibatch=16, episodes_per_iteration=2, epochs_per_batch=2, lr=1e-3),
        model=ModelConfig(**vars(SMALL_MODEL)),
        experiment=ExperimentConfig(**settings),
    )


class TestGae(unittest.TestCase):

    def test_monte_carlo_returns(self):
        advantages, targets = gae([-1.0, 0.0, -2.0], [0.0, 0.0, 0.0], 1.0, 1.0)
        np.testing.assert_array_equal(advantages, [-3.0, -2.0, -2.0])
        np.testing.assert_array_equal(targets, [-3.0, -2.0, -2.0])

    def test_zero_rewards_and_values(self):
        advantages, _ = gae(np.zeros(5), np.zeros(5))
        np.testing.assert_array_equal(advantages, np.zeros(5))

    def test_lambda_zero_is_one_step_residual(self):
        rewards = np.array([-1.0, -0.5, 0.0, -2.0])
        values = np.array([0.3, -0.7, 1.1, 0.4])
        advantages, _ = gae(rewards, values, lambda_gae=0.0, discount=0.9)
        next_values = np.append(values[1:], 0.0)
        np.testing.assert_allclose(advantages, rewards + 0.9 * next_values - values)

    def test_episode_boundaries_stop_bootstrapping(self):
        advantages, _ = gae([-1.0, -1.0, -2.0, 0.0], np.zeros(4), dones=np.array([False, True, False, True]))
        np.testing.assert_array_equal(advantages, [-2.0, -1.0, -2.0, 0.0])

    def test_shared_reward_per_scheduler_column(self):
        advantages, _ = gae([-1.0, -2.0], np.array([[0.0, 1.0], [0.0, 1.0]]))
        np.testing.assert_array_equal(advantages, [[-3.0, -4.0], [-2.0, -3.0]])

    def test_normalisation(self):
        normalised = normalize_advantages(np.array([1.0, 2.0, 3.0, 10.0]))
        self.assertAlmostEqual(normalised.mean(), 0.0, places=12)
        self.assertAlmostEqual(normalised.std(), 1.0, places=6)
        np.testing.assert_array_equal(normalize_advantages(np.array([-4.0])), [-4.0])


class TestLosses(unittest.TestCase):

    def test_policy_loss_clipping(self):
        self.assertAlmostEqual(policy_loss([0.0], [0.0], [2.0], 0.3).item(), -2.0)
        self.assertAlmostEqual(policy_loss([np.log(2.0)], [0.0], [1.0], 0.3).item(), -1.3)
        self.assertAlmostEqual(policy_loss([np.log(0.5)], [0.0], [-1.0], 0.3).item(), 0.7)

    def test_policy_loss_kl_penalty(self):
        loss = policy_loss([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], 0.3, kl=np.array([0.1, 0.3]), kl_coeff=0.5)
        self.assertAlmostEqual(loss.item(), -1.0 + 0.5 * 0.2)

    def test_kl_coefficient_adapts(self):
        self.assertEqual(update_kl_coeff(0.2, 0.05, 0.01), 0.4)
        self.assertEqual(update_kl_coeff(0.2, 0.001, 0.01), 0.1)
        self.assertEqual(update_kl_coeff(0.2, 0.01, 0.01), 0.2)

    def test_value_loss(self):
        self.assertEqual(value_loss([1.0, 2.0], [1.0, 2.0], [1.0, 2.0], 10.0).item(), 0.0)
        self.assertAlmostEqual(value_loss([1.5, 2.5], [1.5, 2.5], [1.0, 2.0], 10.0).item(), 0.25)
        self.assertAlmostEqual(value_loss([100.0], [0.0], [100.0], 10.0).item(), 8100.0)

    def test_vae_loss_vanishes_on_perfect_reconstruction(self):
        logits = np.zeros((2, 2, 6))
        truth = np.array([[3, 0], [5, 1]])
        for row in range(2):
            for queue in range(2):
                logits[row, queue, truth[row, queue]] = 1000.0
        loss = vae_loss(logits, truth, np.zeros((2, 4)), np.ones((2, 4)), beta_kl=1.0)
        self.assertAlmostEqual(loss.item(), 0.0, places=12)

    def test_prior_kl_matches_numeric_integration(self):
        self.assertAlmostEqual(trainer.prior_kl(np.zeros(3), np.ones(3)).item(), 0.0)
        self.assertAlmostEqual(trainer.prior_kl(np.ones(1), np.ones(1)).item(), 0.5)
        grid = np.linspace(-20.0, 20.0, 400001)
        p = np.exp(-0.5 * (grid - 1.0) ** 2) / np.sqrt(2 * np.pi)
        q = np.exp(-0.5 * grid ** 2) / np.sqrt(2 * np.pi)
        numeric = np.sum(p * (np.log(p) - np.log(q))) * (grid[1] - grid[0])
        self.assertAlmostEqual(numeric, 0.5, places=6)

    def test_vae_loss_rejects_out_of_range_states(self):
        with self.assertRaises(ContractError):
            vae_loss(np.zeros((1, 2, 6)), np.array([[0, 6]]), np.zeros((1, 4)), np.ones((1, 4)))

    def test_total_loss_without_vae(self):
        self.assertAlmostEqual(total_loss(nn.Tensor(1.5), nn.Tensor(2.0), nn.Tensor(7.0), kappa=0.0).item(), 2.5)
        self.assertAlmostEqual(total_loss(nn.Tensor(1.5), nn.Tensor(2.0), nn.Tensor(7.0), kappa=0.1).item(), 3.2)


class TestRollouts(unittest.TestCase):

    def setUp(self):
        self.env_config = EnvConfig(episode_len=10, eta=1.2, seed=0)
        self.store = atvc.init_params(SMALL_MODEL, d=2, B=5, seed=1)

    def test_iteration_has_fifty_episodes(self):
        self.assertEqual(trainer.episodes_for(4000, 100, 50), 50)
        self.assertEqual(trainer.episodes_for(4000, 10, 50), 400)

    def test_fields_are_aligned(self):
        trajectory, stats = trainer.collect_rollouts(self.env_config, self.store, 25, seed=3)
        self.assertEqual(trajectory.steps, 30)
        self.assertEqual(trajectory.episodes, 3)
        self.assertEqual(len(stats), 3)
        for name in trajectory.__dataclass_fields__:
            self.assertEqual(getattr(trajectory, name).shape[0], 30, msg=name)
        self.assertEqual(trajectory.observed.shape, (30, 3, 2))
        self.assertTrue(np.all(trajectory.reward <= 0))
        self.assertEqual(sum(s.reward for s in stats), trajectory.reward.sum())

    def test_collections_are_reproducible(self):
        a, _ = trainer.collect_rollouts(self.env_config, self.store, 20, seed=3, iteration=4)
        b, _ = trainer.collect_rollouts(self.env_config, self.store, 20, seed=3, iteration=4)
        np.testing.assert_array_equal(a.raw_logits, b.raw_logits)
        np.testing.assert_array_equal(a.reward, b.reward)

    def test_worker_count_does_not_change_rollouts(self):
        a, _ = trainer.collect_rollouts(self.env_config, self.store, 30, seed=5, workers=1)
        b, _ = trainer.collect_rollouts(self.env_config, self.store, 30, seed=5, workers=2)
        np.testing.assert_array_equal(a.raw_logits, b.raw_logits)
        np.testing.assert_array_equal(a.drops, b.drops)

    def test_too_few_steps_rejected(self):
        with self.assertRaises(ContractError):
            trainer.collect_rollouts(self.env_config, self.store, 5, seed=0)

    def test_positive_reward_rejected(self):
        trajectory, _ = trainer.collect_rollouts(self.env_config, self.store, 10, seed=0)
        fields = {name: getattr(trajectory, name) for name in trajectory.__dataclass_fields__}
        fields["reward"] = np.abs(fields["reward"]) + 1.0
        with self.assertRaises(ContractError):
            Trajectory(**fields)


class TestGradients(unittest.TestCase):

    def setUp(self):
        self.ppo = PPOConfig(train_batch=20, minibatch=8)
        self.store = atvc.init_params(SMALL_MODEL, d=2, B=5, seed=9)
        env_config = EnvConfig(episode_len=10, eta=1.5, seed=0)
        trajectory, _ = trainer.collect_rollouts(env_config, self.store, 20, seed=2)
        advantages, targets = gae(trajectory.reward, trajectory.value, dones=trajectory.done)
        table = atvc.candidate_table(atvc.comm_groups(env_config.resolved_access_map()))
        self.samples = trainer.build_samples(trajectory, table, normalize_advantages(advantages), targets)
        rng = np.random.default_rng(0)
        # move away from ratio 1 so the surrogate and value branches are exercised
        self.samples.old_log_prob = self.samples.old_log_prob + rng.normal(0.0, 0.05, self.samples.size)
        self.samples.old_value = self.samples.old_value + rng.normal(0.0, 0.1, self.samples.size)

    def test_total_loss_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-5
        for _ in range(5):
            batch = self.samples.subset(rng.choice(self.samples.size, size=8, replace=False))
            self.store.zero_grad()
            loss, _ = trainer.minibatch_loss(self.store, batch, self.ppo, 0.2, 5)
            nn.backward(loss)
            analytic = {name: g.copy() for name, g in self.store.gradients().items()}
            with nn.no_grad():
                for name, tensor in self.store.items():
                    flat = tensor.data.reshape(-1)
                    for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                        original = flat[i]
                        flat[i] = original + h
                        up = trainer.minibatch_loss(self.store, batch, self.ppo, 0.2, 5)[1].total
                        flat[i] = original - h
                        down = trainer.minibatch_loss(self.store, batch, self.ppo, 0.2, 5)[1].total
                        flat[i] = original
                        numeric = (up - down) / (2 * h)
                        a = analytic[name].reshape(-1)[i]
                        self.assertLessEqual(abs(a - numeric), 1e-3 * max(abs(a), abs(numeric)) + 1e-7,
                                             msg=f"{name}[{i}]: analytic={a} numeric={numeric}")

    def test_every_parameter_group_learns(self):
        self.store.zero_grad()
        loss, _ = trainer.minibatch_loss(self.store, self.samples, self.ppo, 0.2, 5)
        nn.backward(loss)
        gradients = self.store.gradients()
        for group in atvc.PARAMETER_GROUPS:
            norm = sum(np.abs(g).sum() for name, g in gradients.items() if name.startswith(group + "/"))
            self.assertGreater(norm, 0.0, msg=group)
        self.assertGreater(np.abs(gradients["attention/u_g"]).sum(), 0.0)


class TestEvaluate(unittest.TestCase):

    def setUp(self):
        self.env_config = EnvConfig(episode_len=10, seed=0)
        self.store = atvc.init_params(SMALL_MODEL, d=2, B=5, seed=4)

    def test_zero_threshold_selects_everything(self):
        result = trainer.evaluate(self.store, self.env_config, 3, gamma=0.0, policy=PolicyKind.ATVC, seed=1)
        self.assertEqual(result.comm_ratio, 1.0)

    def test_ablation_ratios(self):
        full = trainer.evaluate(self.store, self.env_config, 2, policy=PolicyKind.ATVC_FULL_COMM, seed=1)
        none = trainer.evaluate(self.store, self.env_config, 2, policy="ATVC-NoComm", seed=1)
        self.assertEqual(full.comm_ratio, 1.0)
        self.assertEqual(none.comm_ratio, 0.0)

    def test_untrained_model_gives_finite_metrics(self):
        result = trainer.evaluate(self.store, self.env_config, 3, seed=2)
        for value in (result.mean_reward, result.drop_rate, result.comm_ratio, result.decoder_accuracy):
            self.assertTrue(np.isfinite(value))
        self.assertGreaterEqual(result.drop_rate, 0.0)
        self.assertLessEqual(result.comm_ratio, 1.0)

    def test_baselines_need_no_model(self):
        result = trainer.evaluate(None, self.env_config, 3, policy=PolicyKind.JSQ, seed=0)
        self.assertEqual(result.comm_ratio, 0.0)
        self.assertTrue(np.isnan(result.decoder_accuracy))
        with self.assertRaises(ContractError):
            trainer.evaluate(None, self.env_config, 3, policy=PolicyKind.ATVC)

    def test_incompatible_checkpoint(self):
        with self.assertRaises(CompatibilityError):
            trainer.evaluate(self.store, EnvConfig(B=4), 1)
        with self.assertRaises(CompatibilityError):
            trainer.evaluate(self.store, EnvConfig(M=3, S=4, d=3), 1)

    def test_summary_reward_is_drops_per_episode(self):
        stats = [EpisodeStats(reward=-3.0, drops=3, arrivals=30), EpisodeStats(reward=-5.0, drops=5, arrivals=10)]
        result = trainer.summarize(PolicyKind.RANDOM, stats)
        self.assertEqual(result.mean_reward, -4.0)
        self.assertEqual(result.drop_rate, 8 / 40)
        self.assertEqual(result.comm_ratio, 0.0)


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.run_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.run_dir, ignore_errors=True)

    def test_writes_metrics_baselines_and_checkpoints(self):
        result = trainer.train(small_run_config(), self.run_dir)
        metrics = pd.read_csv(os.path.join(self.run_dir, trainer.METRICS_FILENAME))
        self.assertEqual(list(metrics.columns), trainer.METRICS_COLUMNS)
        self.assertEqual(metrics["iteration"].tolist(), [1, 2])
        self.assertTrue(np.all(np.isfinite(metrics.drop(columns="iteration").to_numpy())))
        baselines = pd.read_csv(os.path.join(self.run_dir, trainer.BASELINES_FILENAME))
        self.assertEqual(baselines["policy"].tolist(), ["JSQ", "Random"])
        self.assertTrue(os.path.exists(result.checkpoint_path))
        self.assertTrue(os.path.exists(os.path.join(self.run_dir, "checkpoints", "iteration_0002.atvc")))

    def test_zero_learning_rate_keeps_parameters(self):
        config = small_run_config(iterations=1, baseline_episodes=0)
        config.ppo.lr = 0.0
        result = trainer.train(config, self.run_dir)
        fresh = atvc.init_params(config.model, config.env.d, config.env.B, config.experiment.seed)
        for name, tensor in fresh.items():
            np.testing.assert_array_equal(result.store[name].data, tensor.data)
        self.assertEqual(len(result.metrics), 1)

    def test_resume_reproduces_next_iteration(self):
        first_dir = os.path.join(self.run_dir, "first")
        resumed_dir = os.path.join(self.run_dir, "resumed")
        full = trainer.train(small_run_config(), first_dir)
        resumed = trainer.train(small_run_config(), resumed_dir,
                                resume_from=os.path.join(first_dir, "checkpoints", "iteration_0001.atvc"))
        self.assertEqual(resumed.metrics["iteration"].tolist(), [1, 2])
        np.testing.assert_array_equal(resumed.metrics.to_numpy(), full.metrics.to_numpy())
        written = pd.read_csv(os.path.join(resumed_dir, trainer.METRICS_FILENAME), float_precision="round_trip")
        np.testing.assert_array_equal(written.to_numpy(), full.metrics.to_numpy())
        self.assertEqual(resumed.kl_coeff, full.kl_coeff)

    def test_resume_from_final_checkpoint_keeps_history(self):
        first_dir = os.path.join(self.run_dir, "first")
        full = trainer.train(small_run_config(iterations=1), first_dir)
        extended = trainer.train(small_run_config(iterations=2), os.path.join(self.run_dir, "extended"),
                                 resume_from=full.checkpoint_path)
        self.assertEqual(extended.metrics["iteration"].tolist(), [1, 2])
        np.testing.assert_array_equal(extended.metrics.to_numpy()[0], full.metrics.to_numpy()[0])

    def test_reward_scale_applies_to_value_targets_only(self):
        rows = {}
        for scale in (1.0, 0.05):
            config = small_run_config(iterations=1, baseline_episodes=0)
            config.env.eta = 3.0
            config.ppo.reward_scale = scale
            rows[scale] = trainer.train(config, os.path.join(self.run_dir, str(scale))).metrics.iloc[0]
        unscaled, scaled = rows[1.0], rows[0.05]
        self.assertLess(scaled["mean_reward"], 0.0)
        self.assertEqual(scaled["mean_reward"], unscaled["mean_reward"])
        self.assertEqual(scaled["drop_rate"], unscaled["drop_rate"])
        self.assertLess(scaled["value_loss"], 0.05 * unscaled["value_loss"])

    def test_repository_loss_weights_train_the_decoder(self):
        ppo = replace(load_config(REPO_CONFIG).ppo, lr=1e-2)
        env_config = EnvConfig(episode_len=10, eta=3.0)
        store = atvc.init_params(SMALL_MODEL, env_config.d, env_config.B, seed=0)
        trajectory, _ = trainer.collect_rollouts(env_config, store, 40, seed=5)
        advantages, targets = gae(trajectory.reward * ppo.reward_scale, trajectory.value, dones=trajectory.done)
        table = atvc.candidate_table(atvc.comm_groups(env_config.resolved_access_map()))
        samples = trainer.build_samples(trajectory, table, normalize_advantages(advantages), targets)
        _, before = trainer.minibatch_loss(store, samples, ppo, ppo.kl_init_coeff, env_config.B)
        for _ in range(200):
            loss, _ = trainer.minibatch_loss(store, samples, ppo, ppo.kl_init_coeff, env_config.B)
            nn.backward(loss)
            nn.adam_step(store, ppo.lr)
        _, after = trainer.minibatch_loss(store, samples, ppo, ppo.kl_init_coeff, env_config.B)
        self.assertTrue(np.isfinite(after.total))
        self.assertLess(after.vae, 0.5 * before.vae)

    def test_non_finite_loss_aborts_with_diagnostics(self):
        config = small_run_config(iterations=1, baseline_episodes=0)
        store = atvc.init_params(config.model, config.env.d, config.env.B, config.experiment.seed)
        store["decoder/out/b"].data[:] = np.nan
        checkpoint = save_checkpoint(store, trainer.checkpoint_meta(config.model, 2, 5, 0, 0.2),
                                     os.path.join(self.run_dir, "poisoned.atvc"))
        with self.assertRaises(NumericError) as ctx:
            trainer.train(config, self.run_dir, resume_from=checkpoint)
        self.assertTrue(os.path.exists(ctx.exception.diagnostics_path))
        with jsonlines.open(ctx.exception.diagnostics_path) as reader:
            records = list(reader)
        self.assertEqual(records[0]["kind"], "loss_terms")
        poisoned = [r for r in records if r.get("name") == "decoder/out/b"]
        self.assertFalse(poisoned[0]["finite"])

    def test_resume_rejects_incompatible_checkpoint(self):
        store = atvc.init_params(SMALL_MODEL, d=2, B=4, seed=0)
        checkpoint = save_checkpoint(store, trainer.checkpoint_meta(SMALL_MODEL, 2, 4, 0, 0.2),
                                     os.path.join(self.run_dir, "b4.atvc"))
        with self.assertRaises(CompatibilityError):
            trainer.train(small_run_config(), self.run_dir, resume_from=checkpoint)

    def test_invalid_run_config(self):
        config = small_run_config()
        config.ppo.minibatch = 1000
        with self.assertRaises(ConfigurationError):
            trainer.train(config, self.run_dir)
        config = small_run_config()
        config.ppo.clip = 1.0
        with self.assertRaises(ConfigurationError) as ctx:
            config.validate()
        self.assertEqual(ctx.exception.field, "clip")


if __name__ == '__main__':
    unittest.main()
