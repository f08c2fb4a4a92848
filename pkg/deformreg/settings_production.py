"""
Production settings for deformreg workers.
"""
import copy

from .settings import *  # noqa: F401,F403
from .settings import LOGGING as BASE_LOGGING, LOG_DIR
from decouple import config

DEBUG = False

SECRET_KEY = config('SECRET_KEY')

# Rotate the worker log; keep the console for errors only.
LOGGING = copy.deepcopy(BASE_LOGGING)
LOGGING['handlers']['file'].update({
    'level': 'INFO',
    'class': 'logging.handlers.RotatingFileHandler',
    'filename': LOG_DIR / 'deformreg.log',
    'maxBytes': 1024*1024*15,  # 15MB
    'backupCount': 10,
})
LOGGING['handlers']['console'].update({'level': 'ERROR', 'formatter': 'verbose'})
LOGGING['loggers']['apps']['level'] = 'INFO'
LOGGING['loggers']['celery']['level'] = 'INFO'

# Workers need a real broker and result backend.
CELERY_BROKER_URL = config('CELERY_BROKER_URL')
CELERY_RESULT_BACKEND = config('CELERY_RESULT_BACKEND')
CELERY_TASK_ALWAYS_EAGER = False
CELERY_TASK_EAGER_PROPAGATES = False
CELERY_WORKER_PREFETCH_MULTIPLIER = 1
