from django.db import models
from django.utils.translation import gettext_lazy as _


class Run(models.Model):
    STATUS_CHOICES = [
        ("running", _("Running")),
        ("completed", _("Completed")),
        ("failed", _("Failed")),
    ]
    label = models.CharField(max_length=50)
    sweep = models.CharField(max_length=64, blank=True)
    seed = models.BigIntegerField()
    stages = models.CharField(max_length=20)
    baseline = models.BooleanField(default=False)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default="running")
    a_s = models.FloatField(blank=True, null=True)
    a_u = models.FloatField(blank=True, null=True)
    harmonic_mean = models.FloatField(blank=True, null=True)
    config_hash = models.CharField(max_length=64)
    output_dir = models.CharField(max_length=255, blank=True)
    error = models.TextField(blank=True)
    created_time = models.DateTimeField(auto_now_add=True)
    last_updated_time = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ["-created_time"]

    def __str__(self):
        return f"{self.label} seed={self.seed} ({self.status})"

    def mark_completed(self, metrics):
        self.status = "completed"
        self.a_s = metrics.a_s
        self.a_u = metrics.a_u
        self.harmonic_mean = metrics.H
        self.save()
        ClassAccuracy.objects.bulk_create(
            [
                ClassAccuracy(
                    run=self, class_id=class_id, split=split, accuracy=accuracy
                )
                for class_id, split, accuracy in metrics.rows()
            ]
        )

    def mark_failed(self, error):
        self.status = "failed"
        self.error = str(error)
        self.save()


class ClassAccuracy(models.Model):
    SPLIT_CHOICES = [
        ("seen", _("Seen")),
        ("unseen", _("Unseen")),
    ]
    run = models.ForeignKey(
        Run, on_delete=models.CASCADE, related_name="class_accuracies"
    )
    class_id = models.IntegerField()
    split = models.CharField(max_length=10, choices=SPLIT_CHOICES)
    accuracy = models.FloatField()

    class Meta:
        ordering = ["split", "class_id"]
        unique_together = [("run", "class_id")]

    def __str__(self):
        return f"class {self.class_id} ({self.split}): {self.accuracy:.4f}"
