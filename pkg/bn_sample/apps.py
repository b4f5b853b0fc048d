from django.apps import AppConfig


class BnSampleConfig(AppConfig):
    name = "bn_sample"
    verbose_name = "Bayesian network sampling"
