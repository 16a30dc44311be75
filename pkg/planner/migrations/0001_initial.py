# Generated by Django 5.2.6 on 2026-10-19 09:12

from django.db import migrations, models
import django.db.models.deletion
import django.utils.timezone


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='PlanRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('scenario_path', models.TextField(help_text='Path of the scenario file that was planned')),
                ('scenario_name', models.CharField(blank=True, max_length=255)),
                ('cycles_requested', models.PositiveIntegerField(default=0)),
                ('cycles_completed', models.PositiveIntegerField(default=0)),
                ('fallback_count', models.PositiveIntegerField(default=0)),
                ('output_directory', models.TextField(blank=True, help_text='Directory the trace files were written to')),
                ('started_at', models.DateTimeField(default=django.utils.timezone.now)),
                ('completed_at', models.DateTimeField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
        migrations.CreateModel(
            name='PlannedCycle',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('index', models.PositiveIntegerField()),
                ('chosen_lane', models.CharField(blank=True, help_text='Empty when the cycle fell back', max_length=64)),
                ('fallback', models.BooleanField(default=False)),
                ('terminal_station', models.FloatField(blank=True, null=True)),
                ('min_speed', models.FloatField(blank=True, null=True)),
                ('nudge_station', models.FloatField(blank=True, null=True)),
                ('qp_iterations', models.PositiveIntegerField(default=0)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='cycles', to='planner.planrun')),
            ],
            options={
                'ordering': ['run', 'index'],
                'constraints': [models.UniqueConstraint(fields=('run', 'index'), name='unique_cycle_per_run')],
            },
        ),
    ]
