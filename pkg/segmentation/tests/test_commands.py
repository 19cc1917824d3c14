import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from segmentation import tensor_core
from segmentation.management.commands._base import EXIT_CHECK_FAILED, EXIT_RUNTIME, EXIT_USAGE

SMALL_RUN = ('epochs=1', 'base_channels=4', 'block_size=8')


class CommandTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.data_dir = cls.dir / 'rings'
        call_command('gen_data', out=str(cls.data_dir), n=12, size=32, seed=2, stdout=StringIO())

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def call(self, *args, **options):
        out = StringIO()
        call_command(*args, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def test_gen_data(self):
        self.assertTrue((self.data_dir / 'manifest.tsv').exists())
        self.assertEqual(len(list((self.data_dir / 'images').glob('*.nst'))), 12)

    def test_train_then_eval(self):
        run = self.dir / 'train'
        output = self.call('train', *SMALL_RUN, data=str(self.data_dir), out=str(run))
        self.assertIn('Training finished', output)
        self.assertTrue((run / 'best.ckpt').exists())

        report = self.dir / 'dice.csv'
        output = self.call('eval', ckpt=str(run / 'best.ckpt'), data=str(self.data_dir), split='val', report=str(report))
        self.assertIn('Dice on val (2 images)', output)
        self.assertTrue(report.exists())

    def test_mix_demo(self):
        out = self.dir / 'demo'
        output = self.call('mix_demo', 'block_size=8', data=str(self.data_dir), out=str(out), strategy='cutmix')
        self.assertIn('Mix preview (cutmix) written', output)
        self.assertTrue((out / 'plan.txt').exists())

    def test_gradcheck_subset(self):
        output = self.call('gradcheck', 'add', 'relu', instances=2)
        self.assertIn('All 2 cases', output)

    def test_invalid_override_is_usage_error(self):
        with self.assertRaises(CommandError) as cm:
            self.call('train', 'epochs=0', data=str(self.data_dir), out=str(self.dir / 'bad'))
        self.assertEqual(cm.exception.returncode, EXIT_USAGE)

    def test_unknown_gradcheck_case_is_usage_error(self):
        with self.assertRaises(CommandError) as cm:
            self.call('gradcheck', 'no_such_op')
        self.assertEqual(cm.exception.returncode, EXIT_USAGE)

    def test_missing_required_option_is_usage_error(self):
        with self.assertRaises(CommandError) as cm:
            self.call('eval')
        self.assertEqual(cm.exception.returncode, EXIT_USAGE)

    def test_missing_dataset_is_runtime_error(self):
        with self.assertRaises(CommandError) as cm:
            self.call('train', *SMALL_RUN, data=str(self.dir / 'absent'), out=str(self.dir / 'absent_run'))
        self.assertEqual(cm.exception.returncode, EXIT_RUNTIME)

    def test_unreadable_checkpoint_is_runtime_error(self):
        bogus = self.dir / 'bogus.ckpt'
        bogus.write_text('not a checkpoint\n', encoding='utf-8')
        with self.assertRaises(CommandError) as cm:
            self.call('eval', ckpt=str(bogus), data=str(self.data_dir))
        self.assertEqual(cm.exception.returncode, EXIT_RUNTIME)

    def test_failed_gradcheck_exit_code(self):
        def doubled(self, grad):
            return (2.0 * grad * self.active,)

        with mock.patch.object(tensor_core.ReLU, 'backward', doubled):
            with self.assertRaises(CommandError) as cm:
                self.call('gradcheck', 'relu', instances=1)
        self.assertEqual(cm.exception.returncode, EXIT_CHECK_FAILED)

    def test_ablation_check_needs_rows_one_and_five(self):
        with self.assertRaises(CommandError) as cm:
            self.call('ablate', *SMALL_RUN, data=str(self.data_dir), rows='2', seeds=1, out=str(self.dir / 'abl'), check=True)
        self.assertEqual(cm.exception.returncode, EXIT_USAGE)
