from django.apps import AppConfig


class MeshesConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.meshes'
    verbose_name = 'Mesh data model, rigid and non-rigid ICP'
