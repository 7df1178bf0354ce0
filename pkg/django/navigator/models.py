from django.db import models


class RunRecord(models.Model):
    """
    One row per management command invocation, so runs can be listed and audited
    """

    STATUS_RUNNING = 'running'
    STATUS_SUCCEEDED = 'succeeded'
    STATUS_FAILED = 'failed'
    STATUS_CHOICES = [
        (STATUS_RUNNING, 'Running'),
        (STATUS_SUCCEEDED, 'Succeeded'),
        (STATUS_FAILED, 'Failed'),
    ]

    command = models.CharField(max_length=50, db_index=True)
    config_hash = models.CharField(max_length=64, db_index=True)
    output_dir = models.CharField(max_length=1000)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default=STATUS_RUNNING)
    message = models.TextField(blank=True)
    wall_time = models.FloatField(blank=True, null=True, help_text='Seconds')
    created = models.DateTimeField(auto_now_add=True)
    finished = models.DateTimeField(blank=True, null=True)

    def __str__(self):
        return f'{self.command} {self.config_hash[:12]} ({self.status})'

    class Meta:
        ordering = ['-created', '-id']
