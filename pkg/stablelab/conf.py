import logging
from django.conf import settings
from django.core.exceptions import ImproperlyConfigured
from django.utils import timezone

if not settings.configured:
    settings.configure(USE_TZ=True, STABLELAB_SETTINGS={})


DEFAULT_SETTINGS = {
    # absolute tolerance for 1-d integrals (mu_t, subordinator cdf)
    "QUAD_ATOL": 1e-8,
    # absolute tolerance for stable and harmonic kernels
    "KERNEL_ATOL": 1e-6,
    # bound on kernel mass wrapped around by periodic convolution
    "PAD_TOL": 1e-8,
    "MAX_PAD_CELLS": 2**20,
    "CONFIDENCE": 0.99,
    "CHUNK_SIZE": 2000,
    "WORKERS": 1,
    "JUMP_THRESHOLD": 0.25,
    "T_GRID": (1e-3, 10.0, 60),
    "WINDOW_TOL": 1e-6,
}


def get_stablelab_settings() -> dict:
    """
    Fetches and validates the STABLELAB settings from the Django settings.

    Missing keys are filled from DEFAULT_SETTINGS.

    Returns:
        dict: The merged STABLELAB settings.

    Raises:
        ImproperlyConfigured: If STABLELAB_SETTINGS is not a dict, holds an
            unknown key or a value of the wrong type.
    """
    user_settings = getattr(settings, "STABLELAB_SETTINGS", None) or {}

    if not isinstance(user_settings, dict):
        raise ImproperlyConfigured("STABLELAB_SETTINGS must be a dict.")

    merged = dict(DEFAULT_SETTINGS)
    for key, value in user_settings.items():
        if key not in DEFAULT_SETTINGS:
            raise ImproperlyConfigured(
                f"'{key}' is not a STABLELAB_SETTINGS key. Your choices are {sorted(DEFAULT_SETTINGS)}"
            )
        expected = type(DEFAULT_SETTINGS[key])
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if expected is tuple and isinstance(value, list):
            value = tuple(value)
        if not isinstance(value, expected):
            raise ImproperlyConfigured(
                f"STABLELAB_SETTINGS['{key}'] must be {expected.__name__}, got {type(value).__name__}."
            )
        merged[key] = value

    return merged


def get_setting(name: str):
    """
    Retrieve a single STABLELAB setting.

    Args:
        name (str): The uppercase setting key.

    Returns:
        The configured value, or its documented default.

    Raises:
        ImproperlyConfigured: If the key is unknown.
    """
    stablelab_settings = get_stablelab_settings()

    if name not in stablelab_settings:
        raise ImproperlyConfigured(f"'{name}' is not defined in STABLELAB_SETTINGS.")

    return stablelab_settings[name]


def update_settings(overrides: dict):
    """
    Merge overrides into the live STABLELAB_SETTINGS (used by the CLI).
    """
    current = dict(getattr(settings, "STABLELAB_SETTINGS", None) or {})
    current.update(overrides)
    settings.STABLELAB_SETTINGS = current
    # validate eagerly so a bad flag fails before any compute
    get_stablelab_settings()


logger = logging.getLogger(__name__)

echo_info = False


def _stamp(msg):
    timestamp = timezone.now()
    return f"[{timestamp.day:02d}/{timestamp.month:02d}/{timestamp.year} {timestamp.hour:02d}:{timestamp.minute:02d}:{timestamp.second:02d}] {msg}"


def info(msg):
    details = _stamp(msg)
    logger.info(details)
    if echo_info:
        print(details)


def warning(msg):
    logger.warning(_stamp(msg))


def error(msg):
    logger.error(_stamp(msg))
