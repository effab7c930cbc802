"""
Database trail of engine runs. Writes happen after the file outputs exist
and never feed back into a diagnosis.
"""
import logging

from django.db import transaction

from .exceptions import DiagnosisError, flatten_detail
from .serializers import DiagnosisAuditLogSerializer, DiagnosisRecordSerializer, EvaluationRunSerializer

logger = logging.getLogger(__name__)


def _save(serializer):
    if not serializer.is_valid():
        raise DiagnosisError(
            "Ledger rejected the record: %(detail)s",
            code='ledger_rejected', params={'detail': flatten_detail(serializer.errors)},
        )
    return serializer.save()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_jsonable(item) for item in value]
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    return str(value)


def _diagnosis_data(diagnosis, evaluation=None):
    return {
        'case_id': diagnosis.case_id,
        'window_start': diagnosis.window.start,
        'window_end': diagnosis.window.end,
        'backend': diagnosis.backend,
        'model_name': diagnosis.model,
        'tasks': sorted(task.value for task in diagnosis.tasks),
        'document': diagnosis.to_document(),
        'fallback_flags': list(diagnosis.flags),
        'wall_time': diagnosis.wall_time,
        'evaluation': evaluation.run_id if evaluation is not None else None,
    }


def record_action(action, case_id=None, details=None):
    with transaction.atomic():
        return _save(DiagnosisAuditLogSerializer(data={
            'action': action,
            'case_id': case_id,
            'details': _jsonable(details or {}),
        }))


def record_diagnosis(diagnosis):
    with transaction.atomic():
        record = _save(DiagnosisRecordSerializer(data=_diagnosis_data(diagnosis)))
        _save(DiagnosisAuditLogSerializer(data={
            'action': 'DIAGNOSED',
            'case_id': diagnosis.case_id,
            'details': {'flags': list(diagnosis.flags), 'mode': diagnosis.mode, 'backend': diagnosis.backend},
        }))
    logger.debug("Stored diagnosis %s as record %s", diagnosis.case_id, record.diagnosis_id)
    return record


def record_evaluation(report, diagnoses, backend, mode):
    """One EvaluationRun with its DiagnosisRecords, all or nothing."""
    with transaction.atomic():
        run = _save(EvaluationRunSerializer(data={
            'report': report.to_document(),
            'backend': backend,
            'mode': mode,
            'case_count': len(diagnoses),
            'mean_time': report.mean_time,
        }))
        for diagnosis in diagnoses:
            _save(DiagnosisRecordSerializer(data=_diagnosis_data(diagnosis, run)))
        _save(DiagnosisAuditLogSerializer(data={
            'action': 'EVALUATED',
            'case_id': None,
            'details': {'run_id': run.run_id, **report.metrics()},
        }))
    logger.info("Stored evaluation run %s with %d diagnoses", run.run_id, len(diagnoses))
    return run
