# Generated by Django 5.2.8

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='DiagnosisAuditLog',
            fields=[
                ('log_id', models.AutoField(primary_key=True, serialize=False)),
                ('action', models.CharField(choices=[('TRAINED', 'Trained'), ('KEYWORDS_EXTRACTED', 'Keywords extracted'), ('DIAGNOSED', 'Diagnosed'), ('EVALUATED', 'Evaluated'), ('FIXTURE_GENERATED', 'Fixture generated')], max_length=50)),
                ('case_id', models.CharField(blank=True, max_length=255, null=True)),
                ('performed_at', models.DateTimeField(auto_now_add=True)),
                ('details', models.JSONField(blank=True, null=True)),
            ],
            options={
                'db_table': 'diagnosis_audit_log',
            },
        ),
        migrations.CreateModel(
            name='EvaluationRun',
            fields=[
                ('run_id', models.AutoField(primary_key=True, serialize=False)),
                ('report', models.JSONField(help_text='RunReport document: ad, ft, rcl metric groups, mean_time, per_case')),
                ('backend', models.CharField(max_length=50)),
                ('mode', models.CharField(default='full', max_length=30)),
                ('case_count', models.IntegerField(default=0)),
                ('mean_time', models.FloatField(default=0.0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'db_table': 'evaluation_run',
                'indexes': [models.Index(fields=['created_at'], name='idx_evaluation_created_at')],
            },
        ),
        migrations.CreateModel(
            name='DiagnosisRecord',
            fields=[
                ('diagnosis_id', models.AutoField(primary_key=True, serialize=False)),
                ('case_id', models.CharField(max_length=255)),
                ('window_start', models.FloatField()),
                ('window_end', models.FloatField()),
                ('backend', models.CharField(max_length=50)),
                ('model_name', models.CharField(blank=True, default='', max_length=255)),
                ('tasks', models.JSONField(help_text='Requested tasks, e.g. ["AD", "FT", "RCL"]')),
                ('document', models.JSONField(help_text='Full Diagnosis document')),
                ('fallback_flags', models.JSONField(blank=True, default=list)),
                ('wall_time', models.FloatField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('evaluation', models.ForeignKey(blank=True, db_column='run_id', null=True, on_delete=django.db.models.deletion.CASCADE, related_name='diagnoses', to='diagnosis.evaluationrun')),
            ],
            options={
                'db_table': 'diagnosis_record',
                'indexes': [models.Index(fields=['case_id'], name='idx_diagnosis_case'), models.Index(fields=['created_at'], name='idx_diagnosis_created_at')],
            },
        ),
    ]
