"""
Django settings for the deformreg project.

There is no web surface: Django hosts the management commands, configuration,
logging and the test runner.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='deformreg-insecure-change-me')

DEBUG = config('DEBUG', default=True, cast=bool)
ALLOWED_HOSTS = []

# Application definition
DJANGO_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
]

THIRD_PARTY_APPS = [
    'rest_framework',
]

LOCAL_APPS = [
    'apps.common',
    'apps.meshes',
    'apps.shape_models',
    'apps.rendering',
    'apps.registration',
    'apps.augmentation',
    'apps.pipeline',
]

INSTALLED_APPS = DJANGO_APPS + THIRD_PARTY_APPS + LOCAL_APPS

# Nothing is persisted in a database; sqlite keeps Django's checks quiet.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Registration defaults (millimetres, pixels)
DEFORMREG_SEED = config('DEFORMREG_SEED', default=0, cast=int)
DEFORMREG_NEAR_PLANE_MM = config('DEFORMREG_NEAR_PLANE_MM', default=1.0, cast=float)
DEFORMREG_VISIBILITY_TOLERANCE_MM = config('DEFORMREG_VISIBILITY_TOLERANCE_MM', default=1.0, cast=float)
DEFORMREG_DEPTH_PNG_SCALE_MM = config('DEFORMREG_DEPTH_PNG_SCALE_MM', default=0.1, cast=float)
DEFORMREG_ICP_MAX_ITER = config('DEFORMREG_ICP_MAX_ITER', default=100, cast=int)
DEFORMREG_ICP_TOL_MM = config('DEFORMREG_ICP_TOL_MM', default=1e-6, cast=float)
DEFORMREG_RASTER_CHUNK = config('DEFORMREG_RASTER_CHUNK', default=2_000_000, cast=int)

# Celery Configuration
# Tasks run in-process unless a broker is configured and eager mode is switched off.
CELERY_BROKER_URL = config('CELERY_BROKER_URL', default='memory://')
CELERY_RESULT_BACKEND = config('CELERY_RESULT_BACKEND', default='cache+memory://')
CELERY_TASK_ALWAYS_EAGER = config('CELERY_TASK_ALWAYS_EAGER', default=True, cast=bool)
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE

# Logging
LOG_LEVEL = config('LOG_LEVEL', default='INFO')
LOG_DIR = Path(config('LOG_DIR', default=str(BASE_DIR / 'logs')))
LOG_DIR.mkdir(parents=True, exist_ok=True)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': LOG_LEVEL,
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'deformreg.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': LOG_LEVEL,
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console', 'file'],
        'level': 'WARNING',
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'WARNING',
            'propagate': False,
        },
        'apps': {
            'handlers': ['console', 'file'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
        'celery': {
            'handlers': ['console', 'file'],
            'level': 'WARNING',
            'propagate': False,
        },
    },
}
