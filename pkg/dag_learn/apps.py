from django.apps import AppConfig


class DagLearnConfig(AppConfig):
    name = "dag_learn"
    verbose_name = "DAG structure learning"
