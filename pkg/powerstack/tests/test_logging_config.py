"""
Tests for logging setup and the run logging helpers.
"""
import io
import logging
import shutil
import tempfile
import unittest
from pathlib import Path

from powerstack.logging_config import ColoredFormatter, RunLogContext, get_logger, log_run_stats, setup_logging


class LoggingTestBase(unittest.TestCase):

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.stream = io.StringIO()

    def tearDown(self):
        setup_logging(log_to_console=False)
        shutil.rmtree(self.tmp, ignore_errors=True)


# ==================== setup_logging ====================

class SetupLoggingTests(LoggingTestBase):

    def test_console_is_plain_off_a_tty(self):
        setup_logging(stream=self.stream)
        logging.getLogger('powerstack.sim').info("hello")
        self.assertIn('INFO [powerstack.sim] hello', self.stream.getvalue())
        self.assertNotIn('\033[', self.stream.getvalue())

    def test_run_files_created(self):
        setup_logging(log_dir=self.tmp / 'logs', run_name='simulate', stream=self.stream)
        logging.getLogger('powerstack.sim').error("boom")
        for handler in logging.getLogger().handlers:
            handler.flush()
        for name in ('powerstack.log', 'errors.log', 'simulate.log'):
            self.assertIn('boom', (self.tmp / 'logs' / name).read_text())

    def test_setup_replaces_handlers(self):
        setup_logging(stream=self.stream)
        setup_logging(stream=self.stream)
        self.assertEqual(len(logging.getLogger().handlers), 1)

    def test_colored_formatter_leaves_record_alone(self):
        record = logging.LogRecord('x', logging.WARNING, __file__, 1, 'msg', None, None)
        text = ColoredFormatter('%(levelname)s %(message)s').format(record)
        self.assertIn('\033[33mWARNING', text)
        self.assertEqual(record.levelname, 'WARNING')


# ==================== Run helpers ====================

class RunLogContextTests(LoggingTestBase):

    def test_get_logger_namespaced(self):
        self.assertEqual(get_logger('replay').name, 'powerstack.replay')

    def test_success_logs_completion(self):
        setup_logging(stream=self.stream)
        with RunLogContext('sim', 'simulation of 3 jobs'):
            pass
        out = self.stream.getvalue()
        self.assertIn('Starting simulation of 3 jobs...', out)
        self.assertIn('Completed simulation of 3 jobs in', out)

    def test_failure_is_logged_and_raised(self):
        setup_logging(stream=self.stream)
        with self.assertRaises(ValueError):
            with RunLogContext('predictor', 'training'):
                raise ValueError('bad history')
        self.assertIn('Failed training after', self.stream.getvalue())
        self.assertIn('bad history', self.stream.getvalue())

    def test_stats_line(self):
        setup_logging(stream=self.stream)
        log_run_stats(get_logger('sim'), {'jobs': 3, 'energy_j': 12.5})
        self.assertIn('Stats: jobs=3, energy_j=12.5', self.stream.getvalue())
