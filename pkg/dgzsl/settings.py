"""
Django settings for dgzsl project.

Generated by 'django-admin startproject' using Django 3.2.

For more information on this file, see
https://docs.djangoproject.com/en/3.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/3.2/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    "DJANGO_SECRET_KEY", "django-insecure-dgzsl-development-key-change-me"
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get("DJANGO_DEBUG", "1") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "django.contrib.admin",
    "django.contrib.auth",
    "django.contrib.contenttypes",
    "django.contrib.sessions",
    "django.contrib.messages",
    "django.contrib.staticfiles",
    "gan",
    "benchmark",
]

MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.contrib.sessions.middleware.SessionMiddleware",
    "django.middleware.common.CommonMiddleware",
    "django.middleware.csrf.CsrfViewMiddleware",
    "django.contrib.auth.middleware.AuthenticationMiddleware",
    "django.contrib.messages.middleware.MessageMiddleware",
    "django.middleware.clickjacking.XFrameOptionsMiddleware",
]

ROOT_URLCONF = "dgzsl.urls"

TEMPLATES = [
    {
        "BACKEND": "django.template.backends.django.DjangoTemplates",
        "DIRS": [],
        "APP_DIRS": True,
        "OPTIONS": {
            "context_processors": [
                "django.template.context_processors.debug",
                "django.template.context_processors.request",
                "django.contrib.auth.context_processors.auth",
                "django.contrib.messages.context_processors.messages",
            ],
        },
    },
]

WSGI_APPLICATION = "dgzsl.wsgi.application"


# Database
# https://docs.djangoproject.com/en/3.2/ref/settings/#databases

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": BASE_DIR / "db.sqlite3",
    }
}


# Internationalization
# https://docs.djangoproject.com/en/3.2/topics/i18n/

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = True

USE_L10N = True

USE_TZ = True


STATIC_URL = "/static/"

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Logging
# https://docs.djangoproject.com/en/3.2/topics/logging/

DGZSL_LOG_LEVEL = os.environ.get("DGZSL_LOG_LEVEL", "INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name} {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "gan": {
            "handlers": ["console"],
            "level": DGZSL_LOG_LEVEL,
            "propagate": False,
        },
        "benchmark": {
            "handlers": ["console"],
            "level": DGZSL_LOG_LEVEL,
            "propagate": False,
        },
    },
}


# Decoupled GAN defaults. Model widths follow the full-size architecture;
# training defaults are sized for CPU runs on the synthetic benchmark. An
# init_scale of 0.1 is about 1/sqrt(fan_in) at these widths.
DECGAN = {
    "MODEL": {
        "noise_dim": 512,
        "prior_dim": 1024,
        "hidden_dim": 4096,
        "feature_dim": 2048,
        "embed_dim": 312,
    },
    "LOSS": {
        "gp_lambda": 10.0,
        "rec_beta": 0.01,
    },
    "TRAIN": {
        "k": 5,
        "batch_size": 64,
        "epochs": [20, 10, 15],
        "learning_rate": 1e-4,
        "adam_beta1": 0.5,
        "adam_beta2": 0.9,
        "adam_eps": 1e-8,
        "stages": [1, 2, 3],
        "noise_dim": 32,
        "prior_dim": 64,
        "hidden_dim": 256,
        "leaky_slope": 0.2,
        "init_scale": 0.1,
        "ridge": 1.0,
        "regressor_bias": True,
        "prior_grad_in_conditional": False,
        "reconstruction_target": "generated",
    },
    "EVAL": {
        "n_per_class": 400,
        "lr": 1.0,
        "epochs": 300,
        "l2": 1e-4,
        "per_class": True,
    },
    "SYNTHETIC": {
        "n_seen_classes": 10,
        "n_unseen_classes": 5,
        "samples_per_class": 200,
        "feature_dim": 64,
        "embed_dim": 16,
        "cluster_std": 0.1,
        "seed": 0,
        "train_fraction": 0.8,
    },
    "OUTPUT_DIR": os.environ.get("DGZSL_OUTPUT_DIR", os.path.join(BASE_DIR, "runs")),
}
