"""
WSGI config for the lane_planner project.

Serves the run registry (admin and JSON views); planning itself runs
through ``manage.py plan``.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'lane_planner.settings')

application = get_wsgi_application()
