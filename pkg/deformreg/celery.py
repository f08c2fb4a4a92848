"""
Celery application for frame-parallel deformreg stages.

Corpus NICP fits are long and few; dataset frames are short and many. They go to
separate queues so a worker pool can be sized for each.
"""
import os
from celery import Celery

# Set the default Django settings module for the 'celery' program.
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'deformreg.settings')

app = Celery('deformreg')

app.config_from_object('django.conf:settings', namespace='CELERY')

app.conf.task_routes = {
    'apps.pipeline.tasks.fit_corpus_mesh_task': {'queue': 'corpus'},
    'apps.pipeline.tasks.render_dataset_frame_task': {'queue': 'frames'},
}
# Results are collected by the command that dispatched them.
app.conf.result_expires = 3600

app.autodiscover_tasks()
