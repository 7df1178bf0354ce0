import os
import sys

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


# Application definition

INSTALLED_APPS = [
    # Custom apps
    'slides',
    'encoder',
    'mcfn',
    'ndsl',
    'mst',
    'classify',
    'metrics',
    'navigator',
]


# Internationalization

LANGUAGE_CODE = 'en-gb'

TIME_ZONE = 'Europe/London'

USE_I18N = False

USE_TZ = True


# Default primary key field type
# https://docs.djangoproject.com/en/latest/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': os.getenv('NAVIGATOR_LOG_LEVEL', 'INFO'),
    },
}


# Encoders that turn a 256x256 level rendering into patch tokens
# Keys are the EncoderSpec 'kind', values are dotted paths to a factory taking the EncoderSpec

NAVIGATOR_ENCODER_FACTORIES = {
    'toy': 'encoder.encoders.ToyEncoder',
    # 'external': set in local_settings.py to a callable returning an (N, D) array per patch batch
}


# Decision backends for the magnification selection tool

NAVIGATOR_DECISION_BACKENDS = {
    'scripted': 'mst.backends.ScriptedBackend',
    'heuristic': 'mst.backends.HeuristicBackend',
    'remote': 'mst.backends.RemoteBackend',
}

# Default remote backend settings, override these in local_settings.py
NAVIGATOR_REMOTE_BACKEND = {
    'base_url': 'http://127.0.0.1:8000/v1',
    'model': 'navigator-vlm',
    'api_key_env': 'NAVIGATOR_API_KEY',
    'timeout': 30.0,
    'max_retries': 2,
}

# Name of the run manifest written by every command into its output directory
NAVIGATOR_RUN_MANIFEST = 'run-manifest.json'


# Import local_settings.py
SECRET_KEY = None
try:
    from .local_settings import *  # NOQA
except ImportError:
    sys.exit('Unable to import local_settings.py (refer to local_settings.example.py for help)')

# Ensure the SECRET_KEY is supplied in local_settings.py - and trust that the other settings are there too.
if not SECRET_KEY:  # NOQA
    sys.exit('Missing SECRET_KEY in local_settings.py')
