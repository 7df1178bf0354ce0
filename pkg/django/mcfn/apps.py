from django.apps import AppConfig


class McfnConfig(AppConfig):
    name = 'mcfn'
