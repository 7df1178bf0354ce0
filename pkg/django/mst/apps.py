from django.apps import AppConfig


class MstConfig(AppConfig):
    name = 'mst'
