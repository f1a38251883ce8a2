# tests/test_acceptance.py
"""
Long-running checks on a model trained with the repository configuration.

Training 300 iterations takes tens of minutes, so these only run with
ATVC_ACCEPTANCE=1 in the environment.
"""
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

import pandas as pd

from atvc_lab.baselines import PolicyKind
from atvc_lab.experiments import heatmap, heatmap_trend, sweep_delta_t
from atvc_lab.trainer import BASELINES_FILENAME, evaluate, train
from config_loader import load_config

REPO_CONFIG = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config.yaml")
EVAL_EPISODES = 1000


@unittest.skipUnless(os.environ.get("ATVC_ACCEPTANCE") == "1", "set ATVC_ACCEPTANCE=1 to run")
class TestTrainedModel(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.run_dir = tempfile.mkdtemp()
        cls.run_config = load_config(REPO_CONFIG, ["experiment.workers=4", "ppo.rollout_workers=4"])
        cls.result = train(cls.run_config, cls.run_dir)
        cls.store = cls.result.store
        cls.seed = cls.run_config.experiment.seed
        cls.gamma = cls.run_config.model.gamma

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.run_dir, ignore_errors=True)

    def _evaluate(self, policy, env_config=None, episodes=EVAL_EPISODES):
        return evaluate(self.store if policy.uses_model else None, env_config or self.run_config.env, episodes,
                        self.gamma, policy, self.seed, workers=4)

    def test_training_beats_random_and_first_iteration(self):
        rewards = self.result.metrics["mean_reward"]
        final = rewards.tail(10).mean()
        baselines = pd.read_csv(os.path.join(self.run_dir, BASELINES_FILENAME)).set_index("policy")
        random_reward = baselines.loc[PolicyKind.RANDOM.value, "mean_reward"]
        self.assertGreaterEqual(final, 0.7 * random_reward)
        self.assertGreater(final, rewards.iloc[0])

    def test_close_to_jsq_at_unit_delta_t(self):
        frame = sweep_delta_t(self.store, self.run_config.env, [1.0], EVAL_EPISODES, self.gamma, self.seed,
                              [PolicyKind.JSQ, PolicyKind.ATVC], workers=4)
        jsq = frame[frame.policy == PolicyKind.JSQ.value]["drop_rate"].item()
        learned = frame[frame.policy == PolicyKind.ATVC.value]["drop_rate"].item()
        self.assertLessEqual(abs(learned - jsq), 0.2 * jsq)

    def test_communication_is_reduced(self):
        selective = self._evaluate(PolicyKind.ATVC)
        everything = self._evaluate(PolicyKind.ATVC_FULL_COMM)
        self.assertLess(selective.comm_ratio, 0.7)
        self.assertEqual(everything.comm_ratio, 1.0)
        self.assertLessEqual(abs(selective.drop_rate - everything.drop_rate), 0.15 * everything.drop_rate)

    def test_heatmap_prefers_the_shorter_queue(self):
        grid = heatmap(self.store, self.run_config.env, self.run_config.experiment.heatmap_samples, self.gamma,
                       self.seed)
        self.assertTrue((heatmap_trend(grid)["spearman"] < 0).all())

    def test_decoder_recovers_true_lengths(self):
        # 100 episodes of 100 epochs
        fresh = self._evaluate(PolicyKind.ATVC, replace(self.run_config.env, p_stale=0.0), episodes=100)
        stale = self._evaluate(PolicyKind.ATVC, replace(self.run_config.env, p_stale=0.5), episodes=100)
        self.assertGreater(fresh.decoder_accuracy, 0.9)
        self.assertGreater(stale.decoder_accuracy, 0.6)


if __name__ == '__main__':
    unittest.main()
