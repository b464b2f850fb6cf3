from django.contrib import admin
from .models import ClassAccuracy, Run


class ClassAccuracyInline(admin.TabularInline):
    model = ClassAccuracy
    extra = 0
    readonly_fields = ("class_id", "split", "accuracy")
    can_delete = False


@admin.register(Run)
class RunAdmin(admin.ModelAdmin):
    list_display = (
        "id",
        "label",
        "seed",
        "stages",
        "status",
        "a_u",
        "a_s",
        "harmonic_mean",
        "created_time",
    )
    list_filter = ("status", "label", "baseline")
    search_fields = ("label", "sweep", "config_hash")
    date_hierarchy = "created_time"
    inlines = [ClassAccuracyInline]
    actions = ["mark_as_failed"]

    def mark_as_failed(self, request, queryset):
        queryset.update(status="failed")

    mark_as_failed.short_description = "Mark selected runs as failed"
