import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from segmentation.exceptions import CheckpointError, DegenerateInputError, ScribbleMixError, ShapeError
from segmentation.segmentor import (
    Prediction,
    architecture,
    checkpoint_header,
    forward,
    init_segmentor,
    load_checkpoint,
    parameter_count,
    predict_mask,
    save_checkpoint,
)
from segmentation.tensor_core import RngStream, Tensor


def _image(seed=0, size=8):
    return Tensor(np.random.default_rng(seed).normal(size=(1, size, size)))


class InitTests(SimpleTestCase):
    def test_same_seed_same_parameters(self):
        a = init_segmentor(4, 4, RngStream(3))
        b = init_segmentor(4, 4, RngStream(3))
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)

    def test_parameter_count_closed_form(self):
        self.assertEqual(parameter_count(4, 8), 29644)
        self.assertEqual(init_segmentor(4, 8, RngStream(0)).parameter_count(), 29644)

    def test_biases_start_at_zero(self):
        params = init_segmentor(4, 4, RngStream(0))
        for name, _, _, _ in architecture(4, 4):
            np.testing.assert_array_equal(params.bias(name).data, 0)

    def test_kernel_bounds_follow_fan_in(self):
        params = init_segmentor(4, 4, RngStream(0))
        for name, _, c_in, k in architecture(4, 4):
            bound = np.sqrt(6.0 / (c_in * k * k))
            self.assertLessEqual(np.abs(params.kernel(name).data).max(), bound * (1 + 1e-6))

    def test_too_few_classes(self):
        with self.assertRaises(ShapeError):
            init_segmentor(1, 8, RngStream(0))


class ForwardTests(SimpleTestCase):
    def setUp(self):
        self.params = init_segmentor(4, 4, RngStream(1))

    def test_zero_input_gives_simplex(self):
        probs = forward(self.params, Tensor(np.zeros((1, 8, 8)))).probs.data
        self.assertTrue((probs >= 0).all())
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)

    def test_channel_sums(self):
        probs = forward(self.params, _image(2, 16)).probs.data
        self.assertEqual(probs.shape, (4, 16, 16))
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)

    def test_pure(self):
        x = _image(3)
        a = forward(self.params, x).probs.data
        b = forward(self.params, x).probs.data
        np.testing.assert_array_equal(a, b)

    def test_head_permutation_permutes_output(self):
        x = _image(4)
        base = forward(self.params, x).probs.data
        order = [2, 0, 3, 1]
        permuted = self.params.copy()
        permuted.tensors['head.weight'] = Tensor(self.params.kernel('head').data[order])
        permuted.tensors['head.bias'] = Tensor(self.params.bias('head').data[order])
        np.testing.assert_allclose(forward(permuted, x).probs.data, base[order], atol=1e-6)

    def test_gradients_reach_every_layer(self):
        pred = forward(self.params, _image(5))
        pred.probs.channel(1).sum().backward()
        self.assertTrue(any(np.abs(g).sum() > 0 for g in self.params.grads().values()))
        for name, grad in self.params.grads().items():
            self.assertEqual(grad.shape, self.params.tensors[name].shape)

    def test_spatial_size_must_divide_by_four(self):
        with self.assertRaises(ShapeError) as cm:
            forward(self.params, Tensor(np.zeros((1, 6, 8))))
        self.assertEqual(cm.exception.dim, 'H')

    def test_single_channel_input(self):
        with self.assertRaises(ShapeError):
            forward(self.params, Tensor(np.zeros((2, 8, 8))))

    def test_non_finite_input(self):
        x = np.zeros((1, 8, 8))
        x[0, 3, 3] = np.nan
        with self.assertRaises(DegenerateInputError):
            forward(self.params, Tensor(x))

    def test_predict_mask_leaves_parameters_untouched(self):
        mask = predict_mask(self.params, _image(6))
        self.assertEqual(mask.shape, (8, 8))
        self.assertTrue(all(t.grad is None for t in self.params.tensors.values()))


class PredictionTests(SimpleTestCase):
    def test_ties_go_to_lowest_class(self):
        mask = Prediction(Tensor(np.full((4, 2, 2), 0.25))).to_mask()
        np.testing.assert_array_equal(mask.classes, 0)

    def test_argmax(self):
        probs = np.zeros((3, 1, 2))
        probs[2, 0, 0] = 1
        probs[1, 0, 1] = 1
        np.testing.assert_array_equal(Prediction(Tensor(probs)).to_mask().classes, [[2, 1]])


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'model.ckpt'
        self.params = init_segmentor(4, 4, RngStream(9))

    def test_round_trip_is_bit_exact(self):
        save_checkpoint(self.params, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual((loaded.num_classes, loaded.base_channels), (4, 4))
        for name, tensor in self.params.tensors.items():
            self.assertEqual(loaded.tensors[name].data.tobytes(), tensor.data.astype('<f4').tobytes())

    def test_reloaded_model_predicts_identically(self):
        save_checkpoint(self.params, self.path)
        x = _image(10)
        np.testing.assert_array_equal(
            forward(load_checkpoint(self.path), x).probs.data,
            forward(self.params, x).probs.data,
        )

    def test_header(self):
        save_checkpoint(self.params, self.path)
        first_line = self.path.read_bytes().split(b'\n', 1)[0].decode()
        self.assertEqual(first_line, checkpoint_header(self.params))

    def test_foreign_file(self):
        self.path.write_bytes(b'not a checkpoint\n')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path)

    def test_truncated_file(self):
        save_checkpoint(self.params, self.path)
        raw = self.path.read_bytes()
        self.path.write_bytes(raw[:-10])
        with self.assertRaises(ScribbleMixError):
            load_checkpoint(self.path)

    def test_trailing_bytes(self):
        save_checkpoint(self.params, self.path)
        self.path.write_bytes(self.path.read_bytes() + b'\x00')
        with self.assertRaises(ScribbleMixError):
            load_checkpoint(self.path)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(Path(self.tmp.name) / 'absent.ckpt')
