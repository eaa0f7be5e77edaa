"""
Contextrast Settings
Environment-driven configuration and logging setup
"""
import os
import logging.config

from dotenv import load_dotenv

load_dotenv()

# Parallelism for per-(image, class) BANE maps; 0 = one worker per CPU
THREADS = int(os.environ.get('CTXR_THREADS', '0'))

LOG_LEVEL = os.environ.get('CTXR_LOG_LEVEL', 'INFO')

# Slow directional training runs in the test suite
ACCEPTANCE = os.environ.get('CTXR_ACCEPTANCE', 'False') == 'True'

# Default evaluation radii for boundary mIoU (5px / 7px / 10px)
DEFAULT_RADII = (5, 7, 10)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple'
        },
    },
    'loggers': {
        'contextrast': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}


def configure_logging():
    """Install the LOGGING dict"""
    logging.config.dictConfig(LOGGING)


def worker_count():
    """Resolve CTXR_THREADS into a positive worker count"""
    if THREADS > 0:
        return THREADS
    return os.cpu_count() or 1
