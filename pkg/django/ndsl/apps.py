from django.apps import AppConfig


class NdslConfig(AppConfig):
    name = 'ndsl'
