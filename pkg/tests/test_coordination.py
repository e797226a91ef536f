import tempfile
import unittest
from unittest import mock

import numpy as np

import config
from coordination import diagnostics, rounds
from coordination.rounds import (init_simulation, run_round, select_participants, participant_count,
                                 aggregate_clients, aggregate_server)
from data.synthdata import Dataset, Shard, gen_gaussian_mixture
from model.backbone import BackboneTemplate, ParamBlock, ExitHead, init_blocks, init_head
from model.base import parameter_checksum
from model.client import ClientState
from model.server import ServerState
from utils.exception import StructuralError, RoundError
from utils.stat import relative_error


def small_config(output_dir, **overrides):
    values = {'rounds': 2, 'clients': 3, 'samples': 150, 'classes': 3, 'dim': 4, 'depth': 4, 'dims': 6,
              'exit_set': (1, 2, 3), 'local_steps': 2, 'batch_size': 8, 'personalize_steps': 2,
              'output_dir': output_dir, 'verbosity': 0}
    values.update(overrides)
    return config.build_run_config(overrides=values, environ={})


def constant_client(client_id, template, split_depth, value, weight=1.0, indices=(0, )):
    prefix = [ParamBlock(d, np.full(template.block_dims[d - 1], value), np.full(template.block_dims[d - 1][1], value))
              for d in range(1, split_depth + 1)]
    head = ExitHead(split_depth, np.full((template.feature_dim(split_depth), template.num_classes), value),
                    np.full(template.num_classes, value))
    return ClientState(client_id, template, prefix, head, split_depth, 0.5, Shard(client_id, np.asarray(indices), weight), 0)


def constant_server(template, value):
    trunk = [ParamBlock(d, np.full(template.block_dims[d - 1], value), np.full(template.block_dims[d - 1][1], value))
             for d in range(template.min_split + 1, template.depths + 1)]
    head = ExitHead(template.depths, np.full((template.feature_dim(template.depths), template.num_classes), value),
                    np.full(template.num_classes, value))
    return ServerState(template, trunk, head, csa_weight=0.0)


def scalar_template(activation='relu'):
    return BackboneTemplate.from_dims(1, [1, 1, 1], exit_set=(1, 2), num_classes=2, activation=activation)


class TestParticipantSelection(unittest.TestCase):
    def test_count(self):
        self.assertEqual(participant_count(10, 0.3), 3)
        self.assertEqual(participant_count(8, 0.5), 4)
        self.assertEqual(participant_count(3, 0.01), 1)
        self.assertEqual(participant_count(8, 1.0), 8)

    def test_deterministic_and_sorted(self):
        selected = select_participants(8, 0.5, 3, 17)
        self.assertEqual(selected, select_participants(8, 0.5, 3, 17))
        self.assertEqual(selected, sorted(set(selected)))
        self.assertEqual(len(selected), 4)
        self.assertEqual(select_participants(8, 1.0, 3, 17), list(range(8)))

    def test_uniform_frequencies(self):
        counts = np.zeros(8)
        for r in range(10000):
            counts[select_participants(8, 0.5, r, 17)] += 1
        np.testing.assert_allclose(counts / 10000, 0.5, atol=0.02)


class TestAggregation(unittest.TestCase):
    def test_plain_average(self):
        template = scalar_template()
        a, b = constant_client(0, template, 1, 1.0), constant_client(1, template, 1, 3.0)
        for c in aggregate_clients([a, b], 0.0, {0: 0.5, 1: 0.5}):
            for layer in c.params:
                np.testing.assert_array_equal(layer.weights, 2.0)
                np.testing.assert_array_equal(layer.bias, 2.0)

    def test_personal_share(self):
        template = scalar_template()
        a, b = constant_client(0, template, 1, 1.0), constant_client(1, template, 1, 3.0)
        kept = aggregate_clients([a, b], 1.0, {0: 0.5, 1: 0.5})
        self.assertTrue(all(x.same_values(y) for c, ref in zip(kept, [a, b]) for x, y in zip(c.params, ref.params)))
        mixed = aggregate_clients([a, b], 0.5, {0: 0.5, 1: 0.5})
        np.testing.assert_array_equal(mixed[0].prefix[0].weights, 1.5)
        np.testing.assert_array_equal(mixed[1].prefix[0].weights, 2.5)

    def test_depth_aware_renormalization(self):
        template = scalar_template()
        a, b = constant_client(0, template, 2, 1.0), constant_client(1, template, 1, 3.0)
        new_a, new_b = aggregate_clients([a, b], 0.0, {0: 0.25, 1: 0.75})
        np.testing.assert_array_equal(new_a.prefix[0].weights, 2.5)
        np.testing.assert_array_equal(new_b.prefix[0].weights, 2.5)
        # Depth 2 and the two heads have a single owner each
        np.testing.assert_array_equal(new_a.prefix[1].weights, 1.0)
        np.testing.assert_array_equal(new_a.head.weights, 1.0)
        np.testing.assert_array_equal(new_b.head.weights, 3.0)

    def test_contributors_subset(self):
        template = scalar_template()
        a, b = constant_client(0, template, 1, 1.0), constant_client(1, template, 1, 3.0)
        _, new_b = aggregate_clients([a, b], 0.0, {0: 0.5, 1: 0.5}, contributors=[0])
        np.testing.assert_array_equal(new_b.prefix[0].weights, 1.0)

    def test_structural_errors(self):
        template = scalar_template()
        wide = BackboneTemplate.from_dims(1, [2, 2, 2], exit_set=(1, 2), num_classes=2)
        a, b = constant_client(0, template, 1, 1.0), constant_client(1, wide, 1, 3.0)
        with self.assertRaises(StructuralError):
            aggregate_clients([a, b], 0.0, {0: 0.5, 1: 0.5})
        c = constant_client(1, template, 1, 3.0)
        with self.assertRaises(StructuralError):
            aggregate_clients([a, c], 0.0, {0: 0.0, 1: 0.0})

    def test_server_average(self):
        template = scalar_template()
        theta = aggregate_server({0: constant_server(template, 0.0), 1: constant_server(template, 4.0)}, {0: 1, 1: 3})
        for layer in theta.params:
            np.testing.assert_array_equal(layer.weights, 3.0)
            np.testing.assert_array_equal(layer.bias, 3.0)
        single = constant_server(template, 1.7)
        self.assertEqual(parameter_checksum(aggregate_server({4: single}, {4: 0.2}).params),
                         parameter_checksum(single.params))


class TestRounds(unittest.TestCase):
    def test_round_without_local_steps(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            run_config = small_config(tmp_dir, clients=1)
            run_config.train.local_steps = (0, )
            state = init_simulation(run_config)
            new_state, metrics = run_round(0, state, run_config)
        self.assertEqual(parameter_checksum(new_state.clients[0].params), parameter_checksum(state.clients[0].params))
        self.assertEqual(parameter_checksum(new_state.server.params), parameter_checksum(state.server.params))
        self.assertEqual(new_state.round_index, 1)
        self.assertGreater(metrics.bytes_up, 0)
        self.assertGreater(metrics.bytes_down, 0)

    def test_worker_count_does_not_change_results(self):
        results = list()
        for workers in (1, 3):
            with tempfile.TemporaryDirectory() as tmp_dir:
                run_config = small_config(tmp_dir, workers=workers, participation=0.6)
                state, all_metrics = init_simulation(run_config), list()
                for r in range(run_config.train.rounds):
                    state, metrics = run_round(r, state, run_config,
                                               probe_fn=lambda s: diagnostics.round_probe(s, run_config))
                    all_metrics.append(metrics)
            results.append((all_metrics, [parameter_checksum(c.params) for c in state.clients],
                            parameter_checksum(state.server.params)))
        self.assertEqual(results[0], results[1])

    def test_csa_never_touches_server_head(self):
        real_csa_update = rounds.csa_update
        calls = list()

        def checked_csa_update(theta, *args):
            head_before = parameter_checksum([theta.head])
            new_theta, loss = real_csa_update(theta, *args)
            calls.append(head_before == parameter_checksum([new_theta.head]))
            return new_theta, loss
        with tempfile.TemporaryDirectory() as tmp_dir:
            run_config = small_config(tmp_dir)
            state = init_simulation(run_config)
            with mock.patch('coordination.rounds.csa_update', side_effect=checked_csa_update):
                for r in range(run_config.train.rounds):
                    state, _ = run_round(r, state, run_config)
        self.assertEqual(len(calls), 2 * 3 * 2)
        self.assertTrue(all(calls))

    def test_client_failure_names_round_and_client(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            run_config = small_config(tmp_dir)
            state = init_simulation(run_config)
            with mock.patch('coordination.rounds.local_step', side_effect=ValueError("boom")):
                with self.assertRaises(RoundError) as ctx:
                    run_round(4, state, run_config)
        self.assertEqual((ctx.exception.round_index, ctx.exception.client_id), (4, 0))
        self.assertIsInstance(ctx.exception.cause, ValueError)


class TestDiagnostics(unittest.TestCase):
    def test_zero_gradient_at_stationary_point(self):
        template = BackboneTemplate.from_dims(1, [2, 2, 2], exit_set=(1, 2), num_classes=2, activation='linear')
        clients = [constant_client(0, template, 1, 0.0, 0.5, indices=(0, 2)),
                   constant_client(1, template, 2, 0.0, 0.5, indices=(1, 3))]
        ds = Dataset(np.array([[1.0], [-1.0], [1.0], [-1.0]]), np.array([0, 0, 1, 1]), 2)
        theta = constant_server(template, 0.0)
        g = diagnostics.global_gradient(clients, theta, ds, 1.0, 0)
        self.assertEqual(g.norm_sq, 0.0)
        self.assertAlmostEqual(g.objective, np.log(2.0))
        head = clients[0].head
        clients[0] = clients[0].with_params(clients[0].prefix, head.with_params(head.weights, np.array([1.0, 0.0])))
        self.assertGreater(diagnostics.global_gradient(clients, theta, ds, 1.0, 0).norm_sq, 0.0)

    @staticmethod
    def _toy_state(csa_weight):
        rng = np.random.default_rng(5)
        template = BackboneTemplate.from_dims(3, [4, 4, 4], exit_set=(1, 2), num_classes=3)
        blocks = init_blocks(template, range(1, 4), rng)
        ds = gen_gaussian_mixture(3, 3, 40, 1.0, seed=2)
        clients = [ClientState(n, template, [b.copy() for b in blocks[:k]], init_head(template, k, rng), k, 0.5,
                               Shard(n, np.arange(20 * n, 20 * n + 20), 0.5), 0) for n, k in enumerate((1, 2))]
        theta = ServerState(template, [b.copy() for b in blocks[1:]], init_head(template, 3, rng), margin=2.0,
                            csa_weight=csa_weight)
        return clients, theta, ds

    @staticmethod
    def _numerical_gradient(clients, theta, ds, gamma, eps=1e-6):
        v = diagnostics.flatten_state(clients, theta)

        def objective(vector):
            return diagnostics.global_gradient(*diagnostics.unflatten_state(clients, theta, vector), ds, gamma,
                                               0).objective
        g = np.zeros_like(v)
        for i in range(v.shape[0]):
            v_plus, v_minus = v.copy(), v.copy()
            v_plus[i] += eps
            v_minus[i] -= eps
            g[i] = (objective(v_plus) - objective(v_minus)) / (2.0 * eps)
        return g

    def test_global_gradient_finite_differences(self):
        clients, theta, ds = self._toy_state(csa_weight=0.0)
        g = diagnostics.global_gradient(clients, theta, ds, 0.5, 0)
        numeric = self._numerical_gradient(clients, theta, ds, 0.5)
        self.assertLess(relative_error(g.vector(), numeric), 1e-5)
        self.assertAlmostEqual(g.norm_sq, float(np.sum(g.vector() ** 2)))

    def test_contrastive_term_gradient_on_theta(self):
        """ The contrastive term is differentiated w.r.t. theta only (features are constants). """
        clients, theta, ds = self._toy_state(csa_weight=1.0)
        g = diagnostics.global_gradient(clients, theta, ds, 0.5, 0)
        self.assertGreater(sum(c.csa_loss for c in g.per_client), 0.0)
        numeric = self._numerical_gradient(clients, theta, ds, 0.5)
        n_theta = g.theta_grad.shape[0]
        self.assertLess(relative_error(g.vector()[-n_theta:], numeric[-n_theta:]), 1e-5)

    def test_reporting_weights_are_normalized(self):
        clients, theta, ds = self._toy_state(csa_weight=1.0)
        a = diagnostics.global_gradient(clients, theta, ds, 0.5, 0, p=[1.0, 3.0])
        b = diagnostics.global_gradient(clients, theta, ds, 0.5, 0, p=[2.0, 6.0])
        self.assertAlmostEqual(a.norm_sq, b.norm_sq, places=12)
        np.testing.assert_allclose(a.weights, [0.25, 0.75])

    def test_rate_reference(self):
        self.assertAlmostEqual(diagnostics.rate_reference(2.0, 0.1, 10, 4.0), 2.0)
        self.assertEqual(diagnostics.rate_reference(2.0, 0.0, 10, 4.0), float('inf'))
        clients, _, _ = self._toy_state(csa_weight=0.0)
        self.assertAlmostEqual(diagnostics.mean_local_steps(clients, (2, 6)), 4.0)

    def test_state_vector_round_trip(self):
        clients, theta, _ = self._toy_state(csa_weight=0.0)
        v = diagnostics.flatten_state(clients, theta)
        new_clients, new_theta = diagnostics.unflatten_state(clients, theta, v)
        np.testing.assert_array_equal(diagnostics.flatten_state(new_clients, new_theta), v)
        self.assertEqual([c.split_depth for c in new_clients], [1, 2])

    def test_state_probes(self):
        with tempfile.TemporaryDirectory() as tmp_dir:
            run_config = small_config(tmp_dir, diagnostics=True, l_probe_pairs=1, noise_probes=2)
            state = init_simulation(run_config)
        objective, grad_norm_sq, exit_rate = diagnostics.round_probe(state, run_config)
        self.assertEqual(diagnostics.global_objective(state, run_config), objective)
        self.assertEqual(diagnostics.estimate_global_grad_norm(state, run_config), grad_norm_sq)
        self.assertGreater(grad_norm_sq, 0.0)
        self.assertTrue(0.0 <= exit_rate <= 1.0)
        report = diagnostics.probe_assumptions(state, run_config).as_dict()
        self.assertGreaterEqual(report['B'], 1.0)
        self.assertGreater(report['L'], 0.0)
        for k in ('sigma_c_sq', 'sigma_s_sq', 'sigma_q_sq', 'sigma_csa_sq', 'G'):
            self.assertTrue(np.isfinite(report[k]) and report[k] >= 0.0, k)


if __name__ == "__main__":
    unittest.main()
