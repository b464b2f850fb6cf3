# Generated by Django 3.2 on 2026-10-17 09:12

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='Run',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('label', models.CharField(max_length=50)),
                ('sweep', models.CharField(blank=True, max_length=64)),
                ('seed', models.BigIntegerField()),
                ('stages', models.CharField(max_length=20)),
                ('baseline', models.BooleanField(default=False)),
                ('status', models.CharField(choices=[('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='running', max_length=20)),
                ('a_s', models.FloatField(blank=True, null=True)),
                ('a_u', models.FloatField(blank=True, null=True)),
                ('harmonic_mean', models.FloatField(blank=True, null=True)),
                ('config_hash', models.CharField(max_length=64)),
                ('output_dir', models.CharField(blank=True, max_length=255)),
                ('error', models.TextField(blank=True)),
                ('created_time', models.DateTimeField(auto_now_add=True)),
                ('last_updated_time', models.DateTimeField(auto_now=True)),
            ],
            options={
                'ordering': ['-created_time'],
            },
        ),
        migrations.CreateModel(
            name='ClassAccuracy',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('class_id', models.IntegerField()),
                ('split', models.CharField(choices=[('seen', 'Seen'), ('unseen', 'Unseen')], max_length=10)),
                ('accuracy', models.FloatField()),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='class_accuracies', to='benchmark.run')),
            ],
            options={
                'ordering': ['split', 'class_id'],
                'unique_together': {('run', 'class_id')},
            },
        ),
    ]
