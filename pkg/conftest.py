"""Pytest wiring for the Django test suite.

Mirrors what ``manage.py test`` does: configure settings, set up the
test environment and create (then destroy) the test databases.
"""
import os
import sys
from pathlib import Path

PROJECT_DIR = Path(__file__).resolve().parent / 'incident_diagnosis'
if str(PROJECT_DIR) not in sys.path:
    sys.path.insert(0, str(PROJECT_DIR))
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')

import django  # noqa: E402

django.setup()

_old_config = None


def pytest_sessionstart(session):
    global _old_config
    from django.test.utils import setup_databases, setup_test_environment

    setup_test_environment()
    _old_config = setup_databases(verbosity=0, interactive=False)


def pytest_sessionfinish(session, exitstatus):
    from django.test.utils import teardown_databases, teardown_test_environment

    if _old_config is not None:
        teardown_databases(_old_config, verbosity=0)
    teardown_test_environment()
