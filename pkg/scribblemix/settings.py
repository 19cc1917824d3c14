"""
Django settings for the scribblemix project.

The project has no web surface: Django provides the management commands,
the settings layer, form validation and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.1/ref/settings/
"""

from pathlib import Path

from decouple import config
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

# Only used by Django's signing helpers, which the commands never call.
SECRET_KEY = config('SCRIBBLEMIX_SECRET_KEY', default='scribblemix-local-only')


# Application definition

INSTALLED_APPS = [
    'segmentation',
]

# No models, no database.
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# ========================================
# Experiment defaults
# ========================================

# Where gen_data writes and train/eval/ablate/mix_demo read by default
SCRIBBLEMIX_DATA_DIR = Path(config('SCRIBBLEMIX_DATA_DIR', default=str(BASE_DIR / 'data')))

# Desk-scale defaults; a config file or key=value arguments override them per run
SCRIBBLEMIX_EPOCHS = config('SCRIBBLEMIX_EPOCHS', default=200, cast=int)
SCRIBBLEMIX_IMAGE_SIZE = config('SCRIBBLEMIX_IMAGE_SIZE', default=64, cast=int)

# Process pool size for ablation runs
SCRIBBLEMIX_WORKERS = config('SCRIBBLEMIX_WORKERS', default=1, cast=int)


# ========================================
# Logging
# ========================================

SCRIBBLEMIX_LOG_LEVEL = config('SCRIBBLEMIX_LOG_LEVEL', default='INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'standard',
        },
    },
    'loggers': {
        'segmentation': {
            'handlers': ['console'],
            'level': SCRIBBLEMIX_LOG_LEVEL,
            'propagate': False,
        },
    },
}
