from django.apps import AppConfig


class GanConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "gan"
    verbose_name = "Decoupled GAN"
