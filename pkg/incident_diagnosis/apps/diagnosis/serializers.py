from collections.abc import Mapping

from rest_framework import serializers

from .models import DiagnosisAuditLog, DiagnosisRecord, EvaluationRun
from .telemetry import Severity, Task

SEVERITY_ALIASES = {
    'warning': 'warn',
    'err': 'error',
    'critical': 'fatal',
    'crit': 'fatal',
    'trace': 'debug',
    'notice': 'info',
}


class StrictSerializer(serializers.Serializer):
    """Serializer that rejects keys it does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, Mapping):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


# ==================== TELEMETRY RECORD SERIALIZERS ====================

class LogEntrySerializer(serializers.Serializer):
    """One line-delimited log record; extra fields are ignored"""
    timestamp = serializers.FloatField(min_value=0)
    instance = serializers.CharField(trim_whitespace=False, max_length=255)
    severity = serializers.CharField()
    message = serializers.CharField(trim_whitespace=False)

    unknown_severity = False

    def validate_severity(self, value):
        """Case-fold severities; unknown levels become info"""
        folded = SEVERITY_ALIASES.get(value.strip().casefold(), value.strip().casefold())
        if folded not in {level.value for level in Severity}:
            self.unknown_severity = True
            return Severity.INFO.value
        return folded

    def validate_message(self, value):
        if not value.strip():
            raise serializers.ValidationError("message must not be empty")
        return value


class TraceSpanSerializer(serializers.Serializer):
    """One line-delimited span record; extra fields are ignored"""
    trace_id = serializers.CharField(trim_whitespace=False, max_length=255)
    span_id = serializers.CharField(trim_whitespace=False, max_length=255)
    parent_span_id = serializers.CharField(
        trim_whitespace=False, required=False, allow_null=True, allow_blank=True, default=None
    )
    instance = serializers.CharField(trim_whitespace=False, max_length=255)
    call_type = serializers.CharField(max_length=50)
    start = serializers.FloatField(min_value=0)
    duration = serializers.FloatField()
    status_code = serializers.IntegerField(required=False, default=0)

    def validate_parent_span_id(self, value):
        return value or None

    def validate_call_type(self, value):
        return value.casefold()

    def validate(self, attrs):
        if attrs.get('parent_span_id') is not None and attrs['parent_span_id'] == attrs['span_id']:
            raise serializers.ValidationError("parent_span_id must differ from span_id")
        return attrs


# ==================== DATASET SERIALIZERS ====================

class TaskCatalogSerializer(StrictSerializer):
    failure_types = serializers.ListField(
        child=serializers.CharField(trim_whitespace=False), required=False, default=list
    )
    instances = serializers.ListField(
        child=serializers.CharField(trim_whitespace=False), required=False, default=list
    )
    tasks = serializers.ListField(
        child=serializers.ChoiceField(choices=[task.value for task in Task]),
        required=False,
        default=lambda: [task.value for task in Task],
    )

    def validate(self, attrs):
        tasks = set(attrs.get('tasks') or [])
        if Task.FT.value in tasks and not attrs.get('failure_types'):
            raise serializers.ValidationError("failure_types must be non-empty when FT is a task")
        if Task.RCL.value in tasks and not attrs.get('instances'):
            raise serializers.ValidationError("instances must be non-empty when RCL is a task")
        return attrs


class WindowSerializer(StrictSerializer):
    start = serializers.FloatField(min_value=0)
    end = serializers.FloatField(min_value=0)

    def validate(self, attrs):
        if attrs['start'] >= attrs['end']:
            raise serializers.ValidationError("start must precede end")
        return attrs


class DatasetManifestSerializer(StrictSerializer):
    """Manifest document listing the telemetry files of one dataset"""
    metrics_path = serializers.CharField()
    logs_path = serializers.CharField()
    traces_path = serializers.CharField()
    labels_path = serializers.CharField(required=False, allow_null=True, default=None)
    catalog = TaskCatalogSerializer()
    sampling_interval = serializers.FloatField()
    training_windows = WindowSerializer(many=True, required=False, default=list)

    def validate_sampling_interval(self, value):
        if value <= 0:
            raise serializers.ValidationError("sampling_interval must be positive")
        return value


class IncidentLabelSerializer(serializers.Serializer):
    """One labeled case; a null failure_type marks a normal window"""
    case_id = serializers.CharField(max_length=255)
    start = serializers.FloatField(min_value=0)
    end = serializers.FloatField(min_value=0)
    failure_type = serializers.CharField(required=False, allow_null=True, default=None)
    root_cause = serializers.CharField(
        trim_whitespace=False, required=False, allow_null=True, default=None
    )

    def validate(self, attrs):
        if attrs['start'] >= attrs['end']:
            raise serializers.ValidationError("start must precede end")
        if (attrs['failure_type'] is None) != (attrs['root_cause'] is None):
            raise serializers.ValidationError(
                "failure_type and root_cause must both be set or both be null"
            )
        return attrs


# ==================== ENGINE CONFIG SERIALIZERS ====================

class BackendConfigSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=['remote', 'mock'], required=False)
    endpoint = serializers.URLField(required=False, allow_blank=True)
    model = serializers.CharField(required=False)
    temperature = serializers.FloatField(required=False, min_value=0)
    max_tokens = serializers.IntegerField(required=False, min_value=1)
    timeout = serializers.FloatField(required=False, min_value=0.1)
    max_retries = serializers.IntegerField(required=False, min_value=0, max_value=10)
    concurrency_limit = serializers.IntegerField(required=False, min_value=1, max_value=64)

    def validate(self, attrs):
        if attrs.get('kind') == 'remote' and not attrs.get('endpoint'):
            raise serializers.ValidationError("remote backends need an endpoint")
        return attrs


class ThresholdsSerializer(StrictSerializer):
    q = serializers.FloatField(required=False, min_value=0.5, max_value=0.99999)
    k = serializers.IntegerField(required=False, min_value=1)
    scale_factor = serializers.FloatField(required=False, min_value=1e-6)
    p = serializers.IntegerField(required=False, min_value=1, max_value=50)


class FusionPolicySerializer(StrictSerializer):
    textual_log_weight = serializers.FloatField(required=False)
    textual_trace_weight = serializers.FloatField(required=False)
    incident_numerical_weight = serializers.FloatField(required=False)
    incident_textual_weight = serializers.FloatField(required=False)

    def validate(self, attrs):
        for key, value in attrs.items():
            if value <= 0:
                raise serializers.ValidationError({key: "weights must be positive"})
        return attrs


class CapsSerializer(StrictSerializer):
    log_cap = serializers.IntegerField(required=False, min_value=1)
    summary_budget = serializers.IntegerField(required=False, min_value=16)
    topology_edge_cap = serializers.IntegerField(required=False, min_value=1)
    top_channels = serializers.IntegerField(required=False, min_value=1)
    context_budget = serializers.IntegerField(required=False, min_value=64)


class TriageSerializer(StrictSerializer):
    channel_map = serializers.DictField(child=serializers.CharField(), required=False)
    keyword_map = serializers.DictField(child=serializers.CharField(), required=False)


class EngineConfigSerializer(StrictSerializer):
    """Engine configuration document (secrets excluded)"""
    manifest = serializers.CharField()
    model_path = serializers.CharField(required=False)
    keyword_path = serializers.CharField(required=False)
    template_dir = serializers.CharField(required=False, allow_null=True)
    output_dir = serializers.CharField(required=False)
    backend = BackendConfigSerializer(required=False)
    thresholds = ThresholdsSerializer(required=False)
    fusion = FusionPolicySerializer(required=False)
    caps = CapsSerializer(required=False)
    triage = TriageSerializer(required=False)
    window_margin = serializers.FloatField(required=False, min_value=0)
    case_concurrency = serializers.IntegerField(required=False, min_value=1, max_value=64)
    mode = serializers.ChoiceField(
        choices=['full', 'numerical-only', 'textual-only', 'uncoordinated'], required=False
    )


class PromptTemplateSerializer(StrictSerializer):
    """One prompt template file"""
    name = serializers.CharField()
    role = serializers.CharField()
    goal = serializers.CharField()
    constraints = serializers.ListField(child=serializers.CharField(), allow_empty=False)
    instructions = serializers.ListField(child=serializers.CharField(), allow_empty=False)
    example = serializers.CharField()
    variables = serializers.ListField(child=serializers.CharField(), required=False, default=list)


# ==================== FIXTURE CONFIG SERIALIZERS ====================

class FailureInjectionSerializer(StrictSerializer):
    type = serializers.CharField()
    instance = serializers.CharField(trim_whitespace=False)
    start = serializers.FloatField(min_value=0)
    end = serializers.FloatField(min_value=0)

    def validate(self, attrs):
        if attrs['start'] >= attrs['end']:
            raise serializers.ValidationError("failure start must precede end")
        return attrs


class FixtureConfigSerializer(StrictSerializer):
    """Synthetic dataset layout"""
    instances = serializers.ListField(
        child=serializers.CharField(trim_whitespace=False), min_length=2
    )
    duration = serializers.FloatField(min_value=60)
    sampling_interval = serializers.FloatField(required=False, min_value=1)
    start_time = serializers.FloatField(required=False, min_value=0)
    ar_coefficient = serializers.FloatField(required=False, min_value=0, max_value=0.95)
    requests_per_step = serializers.IntegerField(required=False, min_value=1, max_value=50)
    logs_per_step = serializers.FloatField(required=False, min_value=0, max_value=20)
    failures = FailureInjectionSerializer(many=True, required=False)
    normal_windows = WindowSerializer(many=True, required=False)
    training_windows = WindowSerializer(many=True, required=False)


# ==================== LEDGER SERIALIZERS ====================

class DiagnosisRecordSerializer(serializers.ModelSerializer):
    """Serializer for DiagnosisRecord model"""

    class Meta:
        model = DiagnosisRecord
        fields = [
            'diagnosis_id', 'case_id', 'window_start', 'window_end', 'backend', 'model_name',
            'tasks', 'document', 'fallback_flags', 'wall_time', 'evaluation', 'created_at',
        ]
        read_only_fields = ['diagnosis_id', 'created_at']

    def validate_document(self, value):
        if not isinstance(value, dict):
            raise serializers.ValidationError("document must be a JSON object")
        for key in ('case_id', 'answers', 'evidence'):
            if key not in value:
                raise serializers.ValidationError(f"document must contain '{key}'")
        return value


class EvaluationRunSerializer(serializers.ModelSerializer):
    """Serializer for EvaluationRun model"""

    class Meta:
        model = EvaluationRun
        fields = ['run_id', 'report', 'backend', 'mode', 'case_count', 'mean_time', 'created_at']
        read_only_fields = ['run_id', 'created_at']


class DiagnosisAuditLogSerializer(serializers.ModelSerializer):
    """Serializer for DiagnosisAuditLog model"""

    class Meta:
        model = DiagnosisAuditLog
        fields = ['log_id', 'action', 'case_id', 'performed_at', 'details']
        read_only_fields = ['log_id', 'performed_at']
