from django.core.exceptions import ValidationError
from django.db import models


# ==================== EVALUATION RUN ====================

class EvaluationRun(models.Model):
    """One batch evaluation over labeled cases"""

    run_id = models.AutoField(primary_key=True)
    report = models.JSONField(
        help_text="RunReport document: ad, ft, rcl metric groups, mean_time, per_case"
    )
    backend = models.CharField(max_length=50)
    mode = models.CharField(max_length=30, default='full')
    case_count = models.IntegerField(default=0)
    mean_time = models.FloatField(default=0.0)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        db_table = 'evaluation_run'
        indexes = [
            models.Index(fields=['created_at'], name='idx_evaluation_created_at'),
        ]

    def clean(self):
        """Validate report structure"""
        if not isinstance(self.report, dict):
            raise ValidationError("report must be a JSON object")
        for key in ('ad', 'ft', 'rcl'):
            if key not in self.report:
                raise ValidationError(f"report must contain '{key}'")

    def save(self, *args, **kwargs):
        self.full_clean()
        super().save(*args, **kwargs)

    def __str__(self):
        return f"Evaluation {self.run_id} ({self.case_count} cases)"


# ==================== DIAGNOSIS RECORD ====================

class DiagnosisRecord(models.Model):
    """Diagnosis document produced for one case window"""

    diagnosis_id = models.AutoField(primary_key=True)
    case_id = models.CharField(max_length=255)
    window_start = models.FloatField()
    window_end = models.FloatField()
    backend = models.CharField(max_length=50)
    model_name = models.CharField(max_length=255, blank=True, default='')
    tasks = models.JSONField(help_text="Requested tasks, e.g. [\"AD\", \"FT\", \"RCL\"]")
    document = models.JSONField(help_text="Full Diagnosis document")
    fallback_flags = models.JSONField(default=list, blank=True)
    wall_time = models.FloatField()
    evaluation = models.ForeignKey(
        EvaluationRun,
        on_delete=models.CASCADE,
        related_name='diagnoses',
        db_column='run_id',
        null=True,
        blank=True,
    )
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        db_table = 'diagnosis_record'
        indexes = [
            models.Index(fields=['case_id'], name='idx_diagnosis_case'),
            models.Index(fields=['created_at'], name='idx_diagnosis_created_at'),
        ]

    def clean(self):
        """Validate window bounds and document"""
        if self.window_start >= self.window_end:
            raise ValidationError("window_start must precede window_end")
        if self.wall_time < 0:
            raise ValidationError("wall_time must be non-negative")
        if not isinstance(self.document, dict) or 'answers' not in self.document:
            raise ValidationError("document must be a diagnosis object with 'answers'")

    def save(self, *args, **kwargs):
        self.full_clean()
        super().save(*args, **kwargs)

    def __str__(self):
        return f"Diagnosis {self.case_id} [{self.backend}]"


# ==================== AUDIT LOG ====================

class DiagnosisAuditLog(models.Model):
    """Audit trail of engine commands"""

    ACTION_CHOICES = [
        ('TRAINED', 'Trained'),
        ('KEYWORDS_EXTRACTED', 'Keywords extracted'),
        ('DIAGNOSED', 'Diagnosed'),
        ('EVALUATED', 'Evaluated'),
        ('FIXTURE_GENERATED', 'Fixture generated'),
    ]

    log_id = models.AutoField(primary_key=True)
    action = models.CharField(max_length=50, choices=ACTION_CHOICES)
    case_id = models.CharField(max_length=255, blank=True, null=True)
    performed_at = models.DateTimeField(auto_now_add=True)
    details = models.JSONField(blank=True, null=True)

    class Meta:
        db_table = 'diagnosis_audit_log'

    def __str__(self):
        return f"{self.action} - {self.case_id or 'run'}"
