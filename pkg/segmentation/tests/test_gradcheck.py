from unittest import mock

from django.test import SimpleTestCase

from segmentation import tensor_core
from segmentation.gradcheck import CASES, run_gradcheck


class GradcheckSuiteTests(SimpleTestCase):
    def test_every_case_passes(self):
        rows = run_gradcheck()
        self.assertEqual([row.name for row in rows], list(CASES))
        failed = [(row.name, row.error) for row in rows if not row.passed]
        self.assertEqual(failed, [])

    def test_corrupted_relu_backward_is_caught(self):
        def halved(self, grad):
            return (0.5 * grad * self.active,)

        with mock.patch.object(tensor_core.ReLU, 'backward', halved):
            rows = run_gradcheck(['relu', 'segmentor.head'], instances=2)
        self.assertFalse(rows[0].passed)
        self.assertGreater(rows[0].error, 0.1)

    def test_selection_and_determinism(self):
        a = run_gradcheck(['add', 'channel_softmax'], seed=3, instances=2)
        b = run_gradcheck(['add', 'channel_softmax'], seed=3, instances=2)
        self.assertEqual([row.name for row in a], ['add', 'channel_softmax'])
        self.assertEqual(a, b)

    def test_unknown_case(self):
        with self.assertRaises(KeyError):
            run_gradcheck(['no_such_op'])
