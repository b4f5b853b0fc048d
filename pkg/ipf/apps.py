from django.apps import AppConfig


class IpfConfig(AppConfig):
    name = "ipf"
    verbose_name = "Proportional fitting and conditional populations"
