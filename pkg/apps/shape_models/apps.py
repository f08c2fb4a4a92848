from django.apps import AppConfig


class ShapeModelsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.shape_models'
    verbose_name = 'PCA shape models'
