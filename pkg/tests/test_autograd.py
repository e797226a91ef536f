import unittest

import numpy as np

from coordination.rounds import task_loss_grad
from model import functional
from model.autograd import GradTape, LayerGrad, backward
from model.backbone import BackboneTemplate, init_blocks, init_head, forward_prefix, apply_head
from model.base import flatten_layers, flatten_grads, assign_flat, select_grads, sgd_step
from model.client import ClientState, Batch, AdaptConfig, make_views, outer_update
from model.server import ServerState, u_shaped_task_forward, apply_upstream_grad
from data.synthdata import Shard
from utils.exception import TapeError, ShapeError, KeyMismatchError
from utils.stat import relative_error


def numerical_grad(f, v: np.ndarray, eps=1e-6) -> np.ndarray:
    """ Central finite differences of a scalar function of a flat vector. """
    g = np.zeros_like(v)
    for i in range(v.shape[0]):
        v_plus, v_minus = v.copy(), v.copy()
        v_plus[i] += eps
        v_minus[i] -= eps
        g[i] = (f(v_plus) - f(v_minus)) / (2.0 * eps)
    return g


def toy_setup(seed, split_depth=2, batch_size=6):
    rng = np.random.default_rng(seed)
    template = BackboneTemplate.from_dims(3, [4, 4, 4, 4], exit_set=(1, 2), num_classes=3)
    blocks = init_blocks(template, range(1, 5), rng)
    client = ClientState(0, template, blocks[:split_depth], init_head(template, split_depth, rng), split_depth, 0.5,
                         Shard(0, np.arange(batch_size), 1.0), seed)
    server = ServerState(template, [b.copy() for b in blocks[template.min_split:]], init_head(template, 4, rng),
                         csa_weight=0.0)
    x = rng.normal(size=(batch_size, 3))
    y = rng.integers(0, 3, size=batch_size)
    return client, server, x, y


class TestGradTape(unittest.TestCase):
    def test_exit_loss_finite_differences(self):
        for seed in range(20):
            client, _, x, y = toy_setup(seed)

            def loss_fn(v):
                layers = assign_flat(client.params, v)
                z = forward_prefix(layers[:-1], x, client.split_depth)
                tape = GradTape()
                return float(tape.cross_entropy(tape.constant(apply_head(layers[-1], z)), y).value)
            tape = GradTape()
            z = forward_prefix(client.prefix, x, client.split_depth, tape)
            loss = tape.cross_entropy(apply_head(client.head, z, tape), y)
            analytic = flatten_grads(client.params, select_grads(client.params, backward(tape, loss)))
            numeric = numerical_grad(loss_fn, flatten_layers(client.params))
            self.assertLess(relative_error(analytic, numeric), 1e-5, "seed {}".format(seed))

    def test_cut_gradient_finite_differences(self):
        for seed in range(20):
            client, server, x, y = toy_setup(seed)
            gamma = 0.3
            z = client.features(x)
            logits, ctx = u_shaped_task_forward(server, z, client.split_depth)
            _, g_u = task_loss_grad(logits, y)
            new_server, g_z = apply_upstream_grad(server, ctx, g_u, 1.0, gamma)

            def loss_of_z(v):
                tape = GradTape()
                _, ctx_v = u_shaped_task_forward(server, v.reshape(z.shape), client.split_depth)
                return (1.0 - gamma) * float(tape.cross_entropy(tape.constant(ctx_v.u.value), y).value)
            numeric = numerical_grad(loss_of_z, z.ravel())
            self.assertLess(relative_error(g_z.ravel(), numeric), 1e-5, "seed {}".format(seed))

            def loss_of_theta(v):
                layers = assign_flat(server.params, v)
                s = server.with_params(layers[:-1], layers[-1])
                logits_v, _ = u_shaped_task_forward(s, z, client.split_depth)
                return (1.0 - gamma) * task_loss_grad(logits_v, y)[0]
            # SGD step of size 1: the update is the gradient
            analytic = flatten_layers(server.params) - flatten_layers(new_server.params)
            numeric = numerical_grad(loss_of_theta, flatten_layers(server.params))
            self.assertLess(relative_error(analytic, numeric), 1e-5, "seed {}".format(seed))

    def test_composite_client_loss_finite_differences(self):
        """ Without adaptation steps, the outer update is a gradient step on gamma.l_C + (1-gamma).l_S """
        for seed in range(20):
            client, server, x, y = toy_setup(seed)
            gamma = 0.6
            batch = Batch(x, y, np.arange(len(y)))
            view = make_views(client, batch, batch, 1, AdaptConfig(0.1, 0, len(y)))
            logits, ctx = u_shaped_task_forward(server, view.z_ddagger, client.split_depth)
            _, g_u = task_loss_grad(logits, y)
            _, g_z = apply_upstream_grad(server, ctx, g_u, 0.0, gamma)
            updated = outer_update(client, view.view_tape, g_z, 1.0, gamma)

            def loss_fn(v):
                layers = assign_flat(client.params, v)
                c = client.with_params(layers[:-1], layers[-1])
                loss_c = task_loss_grad(c.local_logits(x), y)[0]
                logits_v, _ = u_shaped_task_forward(server, c.features(x), client.split_depth)
                return gamma * loss_c + (1.0 - gamma) * task_loss_grad(logits_v, y)[0]
            analytic = flatten_layers(client.params) - flatten_layers(updated.params)
            numeric = numerical_grad(loss_fn, flatten_layers(client.params))
            self.assertLess(relative_error(analytic, numeric), 1e-5, "seed {}".format(seed))

    def test_contrastive_alignment_finite_differences(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        indicator = np.array([1, 0, 0, 1, 0, 1, 0, 0])
        margin = 2.5
        tape = GradTape()
        a_node, b_node = tape.watch(a), tape.watch(b)
        loss = tape.contrastive_alignment(a_node, b_node, indicator, margin)
        grad_a, grad_b = tape.backward(loss=loss, wrt=[a_node, b_node]).inputs

        def loss_of_a(v):
            t = GradTape()
            return float(t.contrastive_alignment(t.constant(v.reshape(a.shape)), t.constant(b), indicator,
                                                 margin).value)
        self.assertLess(relative_error(grad_a.ravel(), numerical_grad(loss_of_a, a.ravel())), 1e-5)
        np.testing.assert_allclose(grad_b, -grad_a)

    def test_stop_gradient(self):
        client, _, x, y = toy_setup(0)
        tape = GradTape()
        z = forward_prefix(client.prefix, x, client.split_depth, tape)
        stopped = tape.stop_gradient(z)
        loss = tape.cross_entropy(apply_head(client.head, stopped, tape), y)
        grads = backward(tape, loss)
        for block in client.prefix:
            self.assertFalse(np.any(grads[block].weights))
            self.assertFalse(np.any(grads[block].bias))
        self.assertTrue(np.any(grads[client.head].weights))

    def test_unreached_layer_has_zero_gradient(self):
        client, server, x, y = toy_setup(1)
        tape = GradTape()
        tape.bind_layer(server.head)
        loss = tape.cross_entropy(apply_head(client.head, client.features(x), tape), y)
        grads = backward(tape, loss)
        self.assertFalse(np.any(grads[server.head].weights))

    def test_tape_is_single_use(self):
        client, _, x, y = toy_setup(2)
        tape = GradTape()
        loss = tape.cross_entropy(apply_head(client.head, client.features(x), tape), y)
        backward(tape, loss)
        with self.assertRaises(TapeError):
            backward(tape, loss)
        with self.assertRaises(TapeError):
            tape.constant(1.0)

    def test_loss_from_another_tape(self):
        client, _, x, y = toy_setup(2)
        tape, other = GradTape(), GradTape()
        loss = other.cross_entropy(apply_head(client.head, client.features(x), other), y)
        with self.assertRaises(TapeError):
            backward(tape, loss)

    def test_shape_error_names_depth(self):
        client, _, _, _ = toy_setup(0)
        with self.assertRaises(ShapeError) as ctx:
            forward_prefix(client.prefix, np.zeros((2, 5)), client.split_depth, GradTape())
        self.assertIn('depth 1', str(ctx.exception))

    def test_tape_free_forward_is_identical(self):
        client, _, x, _ = toy_setup(4)
        tape = GradTape()
        with_tape = forward_prefix(client.prefix, x, client.split_depth, tape).value
        np.testing.assert_array_equal(with_tape, client.features(x))


class TestFunctional(unittest.TestCase):
    def test_softmax_entropy(self):
        self.assertAlmostEqual(functional.softmax_entropy(np.zeros(4)), np.log(4.0))
        self.assertAlmostEqual(functional.softmax_entropy(np.array([0.0, 1000.0, 0.0])), 0.0)
        # Shift invariance
        logits = np.array([0.3, -1.2, 2.0])
        self.assertAlmostEqual(functional.softmax_entropy(logits), functional.softmax_entropy(logits + 50.0))
        np.testing.assert_allclose(functional.softmax_entropies(np.stack([logits, np.zeros(3)])),
                                   [functional.softmax_entropy(logits), np.log(3.0)])
        with self.assertRaises(ValueError):
            functional.softmax_entropy(np.zeros(0))

    def test_uniform_logits_are_max_entropy(self):
        for num_classes in (2, 3, 4, 6, 7, 10, 14):
            for value in (0.0, 3.7, -120.5):
                logits = np.full(num_classes, value)
                self.assertEqual(functional.softmax_entropy(logits), np.log(num_classes), (num_classes, value))
                self.assertEqual(functional.softmax_entropies(np.stack([logits, logits]))[1], np.log(num_classes))
            # Nearly uniform logits stay strictly below the maximum
            nearly = np.zeros(num_classes)
            nearly[0] = 1e-3
            self.assertLess(functional.softmax_entropy(nearly), np.log(num_classes))

    def test_predictions(self):
        logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 3.0]])
        np.testing.assert_array_equal(functional.predict(logits), [0, 2])
        self.assertEqual(functional.accuracy(logits, [0, 1]), 0.5)
        self.assertTrue(np.isnan(functional.accuracy(logits[:0], [])))


class TestSgdStep(unittest.TestCase):
    def test_step(self):
        client, _, _, _ = toy_setup(0)
        grads = {p: LayerGrad(np.ones_like(p.weights), np.full_like(p.bias, 2.0)) for p in client.params}
        updated = sgd_step(client.params, grads, 0.5)
        for new, old in zip(updated, client.params):
            self.assertIs(type(new), type(old))
            np.testing.assert_array_equal(new.weights, old.weights - 0.5)
            np.testing.assert_array_equal(new.bias, old.bias - 1.0)
        unchanged = sgd_step(client.params, grads, 0.0)
        self.assertTrue(all(a.same_values(b) for a, b in zip(unchanged, client.params)))

    def test_keys_must_match(self):
        client, server, _, _ = toy_setup(0)
        grads = {p: LayerGrad(np.zeros_like(p.weights), np.zeros_like(p.bias)) for p in client.params}
        with self.assertRaises(KeyMismatchError):
            sgd_step(client.params, {p: grads[p] for p in client.params[:-1]}, 0.1)
        with self.assertRaises(KeyMismatchError):
            select_grads(client.params, {server.head: LayerGrad(server.head.weights, server.head.bias)})
        with self.assertRaises(ValueError):
            sgd_step(client.params, grads, -0.1)


if __name__ == "__main__":
    unittest.main()
