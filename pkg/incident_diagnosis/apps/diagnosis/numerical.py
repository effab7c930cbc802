"""
Numerical perspective: a per-(instance, channel) autoregressive forecaster
trained on normal periods, deviation matrices and the numerical feature.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .digest import DEFAULT_CHANNEL_MAP, rank_types_from_channels, topology_digest
from .exceptions import ForecasterError
from .telemetry import ADResult, ALL_TASKS, ExpertOutput, Task, TimeWindow, pad_ranking

logger = logging.getLogger(__name__)

MODEL_FORMAT = 'incident-diagnosis.forecaster'
MODEL_VERSION = 1
DEFAULT_ORDER = 5
DEFAULT_QUANTILE = 0.995
DEFAULT_MIN_ABNORMAL = 3
TOP_CHANNEL_CAP = 20
HISTORY_FACTOR = 10


# ==================== FORECASTER ====================

@dataclass(frozen=True)
class Forecaster:
    """Fitted model. ``coefficients[s, f]`` holds ``p`` lag weights then the
    intercept; ``means``/``stds`` normalize each (instance, channel) series."""

    order: int
    instances: tuple
    channels: tuple
    coefficients: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    fallback: np.ndarray
    residual_quantile: float
    quantile: float = DEFAULT_QUANTILE
    training: Mapping = field(default_factory=dict)
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 1:
            raise ForecasterError("order must be at least 1", code='invalid_model_file')
        shape = (len(self.instances), len(self.channels))
        coefficients = np.array(self.coefficients, dtype=float)
        if coefficients.shape != shape + (self.order + 1,):
            raise ForecasterError(
                "coefficient array shape %(shape)s does not match the axes",
                code='invalid_model_file', params={'shape': coefficients.shape},
            )
        for name in ('means', 'stds', 'fallback'):
            array = np.array(getattr(self, name), dtype=bool if name == 'fallback' else float)
            if array.shape != shape:
                raise ForecasterError("%(name)s shape mismatch", code='invalid_model_file', params={'name': name})
            array.flags.writeable = False
            object.__setattr__(self, name, array)
        coefficients.flags.writeable = False
        object.__setattr__(self, 'coefficients', coefficients)
        object.__setattr__(self, 'instances', tuple(self.instances))
        object.__setattr__(self, 'channels', tuple(self.channels))

    def pair(self, instance, channel):
        """(mean, std, coefficients, known) of a pair; unseen pairs get the
        persistence model on raw values."""
        try:
            s = self.instances.index(instance)
            f = self.channels.index(channel)
        except ValueError:
            return 0.0, 1.0, persistence_coefficients(self.order), False
        return self.means[s, f], self.stds[s, f], self.coefficients[s, f], True

    def to_record(self):
        return {
            'format': MODEL_FORMAT,
            'version': MODEL_VERSION,
            'order': self.order,
            'quantile': self.quantile,
            'residual_quantile': self.residual_quantile,
            'instances': list(self.instances),
            'channels': list(self.channels),
            'coefficients': self.coefficients.tolist(),
            'means': self.means.tolist(),
            'stds': self.stds.tolist(),
            'fallback': self.fallback.tolist(),
            'training': dict(self.training),
            'provenance': dict(self.provenance),
        }

    def dumps(self):
        return json.dumps(self.to_record(), sort_keys=True, indent=1) + '\n'

    @classmethod
    def loads(cls, text):
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ForecasterError("Model file is not valid JSON: %(detail)s",
                                  code='invalid_model_file', params={'detail': str(exc)})
        if not isinstance(record, dict) or record.get('format') != MODEL_FORMAT:
            raise ForecasterError("Not a forecaster model file", code='invalid_model_file')
        if record.get('version') != MODEL_VERSION:
            raise ForecasterError(
                "Model file version %(version)s is not supported",
                code='incompatible_model', params={'version': record.get('version')},
            )
        try:
            return cls(
                order=int(record['order']),
                instances=tuple(record['instances']),
                channels=tuple(record['channels']),
                coefficients=np.array(record['coefficients'], dtype=float).reshape(
                    len(record['instances']), len(record['channels']), int(record['order']) + 1
                ),
                means=np.array(record['means'], dtype=float).reshape(len(record['instances']), len(record['channels'])),
                stds=np.array(record['stds'], dtype=float).reshape(len(record['instances']), len(record['channels'])),
                fallback=np.array(record['fallback'], dtype=bool).reshape(len(record['instances']), len(record['channels'])),
                residual_quantile=float(record['residual_quantile']),
                quantile=float(record['quantile']),
                training=record.get('training') or {},
                provenance=record.get('provenance') or {},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ForecasterError("Model file is incomplete: %(detail)s",
                                  code='invalid_model_file', params={'detail': str(exc)})

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding='utf-8') as handle:
                return cls.loads(handle.read())
        except FileNotFoundError:
            raise ForecasterError("Model file %(path)s does not exist",
                                  code='invalid_model_file', params={'path': str(path)})


def persistence_coefficients(order):
    coefficients = np.zeros(order + 1)
    coefficients[0] = 1.0
    return coefficients


def _lag_design(series, order):
    """Rows ``[x_{t-1} .. x_{t-p}, 1]`` and targets ``x_t`` for t >= p."""
    rows = len(series) - order
    design = np.ones((rows, order + 1))
    for lag in range(1, order + 1):
        design[:, lag - 1] = series[order - lag:len(series) - lag]
    return design, series[order:]


def _predict(z, coefficients, order):
    """One-step predictions for rows p.. of ``z`` (T x S x F)."""
    length = z.shape[0]
    prediction = np.broadcast_to(coefficients[..., order], z[order:].shape).copy()
    for lag in range(1, order + 1):
        prediction += coefficients[..., lag - 1] * z[order - lag:length - lag]
    return prediction


def _as_segments(normal):
    segments = list(normal) if isinstance(normal, (list, tuple)) else [normal]
    if not segments:
        raise ForecasterError("No training data", code='insufficient_history')
    first = segments[0]
    for segment in segments[1:]:
        if segment.instances != first.instances or segment.channels != first.channels:
            raise ForecasterError("Training windows must share instances and channels",
                                  code='incompatible_model')
    return segments


def fit_forecaster(normal, p=DEFAULT_ORDER, q=DEFAULT_QUANTILE, provenance=None):
    """Least-squares fit of every (instance, channel) series on its own
    ``p`` previous z-normalized values plus an intercept.

    Normalization is per (instance, channel) pair, not per channel: the model
    stores ``means`` and ``stds`` as instance x channel arrays next to the
    coefficients, and zero-variance pairs are stored with stddev 1.

    ``normal`` is one TimeSeriesMatrix or a list of them (separate normal
    periods; lags never cross a period boundary).
    """
    segments = _as_segments(normal)
    total = sum(len(segment) for segment in segments)
    usable = [segment for segment in segments if len(segment) > p]
    if total < HISTORY_FACTOR * p or not usable:
        raise ForecasterError(
            "Training data has %(count)d timestamps; at least %(required)d are needed for p=%(p)d",
            code='insufficient_history', params={'count': total, 'required': HISTORY_FACTOR * p, 'p': p},
        )

    instances, channels = segments[0].instances, segments[0].channels
    stacked = np.concatenate([segment.values for segment in segments], axis=0)
    means = stacked.mean(axis=0)
    stds = stacked.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    normalized = [(segment.values - means) / stds for segment in usable]

    coefficients = np.zeros((len(instances), len(channels), p + 1))
    fallback = np.zeros((len(instances), len(channels)), dtype=bool)
    for s, instance in enumerate(instances):
        for f, channel in enumerate(channels):
            designs, targets = zip(*(_lag_design(z[:, s, f], p) for z in normalized))
            design = np.concatenate(designs)
            target = np.concatenate(targets)
            try:
                solution = np.linalg.lstsq(design, target, rcond=None)[0]
            except np.linalg.LinAlgError:
                solution = None
            if solution is None or not np.isfinite(solution).all():
                logger.warning("Singular fit for %s/%s, using persistence", instance, channel)
                solution = persistence_coefficients(p)
                fallback[s, f] = True
            coefficients[s, f] = solution

    deviations = [np.abs(_predict(z, coefficients, p) - z[p:]) for z in normalized]
    scores = np.concatenate([per_timestamp_score(values) for values in deviations])
    residual_quantile = float(np.quantile(scores, q))
    training = {
        'samples': int(total),
        'score_mean': float(scores.mean()),
        'score_median': float(np.median(scores)),
        'score_max': float(scores.max()),
    }
    logger.info(
        "Fitted forecaster p=%d on %d timestamps; threshold %.4f (q=%s)",
        p, total, residual_quantile, q,
    )
    return Forecaster(
        order=p,
        instances=instances,
        channels=channels,
        coefficients=coefficients,
        means=means,
        stds=stds,
        fallback=fallback,
        residual_quantile=residual_quantile,
        quantile=q,
        training=training,
        provenance=dict(provenance or {}),
    )


def training_residual_stats(model):
    stats = dict(model.training)
    stats['threshold'] = model.residual_quantile
    stats['quantile'] = model.quantile
    stats['persistence_pairs'] = int(model.fallback.sum())
    return stats


# ==================== DEVIATION ====================

@dataclass(frozen=True)
class DeviationMatrix:
    """|prediction - normalized actual| per cell; the first ``p``
    timestamps of the evaluated matrix have no row."""

    timestamps: np.ndarray
    instances: tuple
    channels: tuple
    values: np.ndarray
    persistence_pairs: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if (values < 0).any():
            raise ForecasterError("deviations must be non-negative", code='invalid_model_file')
        values.flags.writeable = False
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'timestamps', np.array(self.timestamps, dtype=float))

    def __len__(self):
        return len(self.timestamps)

    def restrict(self, start, end):
        mask = (self.timestamps >= start) & (self.timestamps <= end)
        return DeviationMatrix(
            self.timestamps[mask], self.instances, self.channels, self.values[mask], self.persistence_pairs
        )


def deviation(model, matrix):
    order = model.order
    if len(matrix) < order + 1:
        raise ForecasterError(
            "Need at least %(required)d timestamps to score, got %(count)d",
            code='insufficient_history', params={'required': order + 1, 'count': len(matrix)},
        )
    shape = matrix.shape[1:]
    means = np.zeros(shape)
    stds = np.ones(shape)
    coefficients = np.zeros(shape + (order + 1,))
    unseen = []
    for s, instance in enumerate(matrix.instances):
        for f, channel in enumerate(matrix.channels):
            mean, std, vector, known = model.pair(instance, channel)
            if not known:
                unseen.append((instance, channel))
            means[s, f], stds[s, f] = mean, std
            coefficients[s, f] = vector
    if unseen:
        logger.warning("%d unseen (instance, channel) pairs use persistence", len(unseen))
    z = (matrix.values - means) / stds
    values = np.abs(_predict(z, coefficients, order) - z[order:])
    return DeviationMatrix(
        timestamps=matrix.timestamps[order:],
        instances=matrix.instances,
        channels=matrix.channels,
        values=values,
        persistence_pairs=tuple(unseen),
    )


def per_timestamp_score(deviations):
    """L2 norm across instances and channels at each timestamp."""
    values = deviations.values if isinstance(deviations, DeviationMatrix) else np.asarray(deviations, dtype=float)
    return np.sqrt(np.square(values).sum(axis=(1, 2)))


def detect(scores, model, k=DEFAULT_MIN_ABNORMAL, scale_factor=1.0, timestamps=None):
    """Timestamps scoring above ``residual_quantile * scale_factor``; the
    window is anomalous with at least ``k`` of them."""
    scores = np.asarray(scores, dtype=float)
    threshold = model.residual_quantile * scale_factor
    abnormal = np.flatnonzero(scores > threshold)
    stamps = np.asarray(timestamps, dtype=float)[abnormal] if timestamps is not None else abnormal
    return ADResult(len(abnormal) >= k, tuple(stamps.tolist()))


def rank_instances(deviations, window=None, instances=None):
    """(instance, score) pairs, score being the max over time of the
    per-instance L2 norm; descending, ties by instance name. ``instances``
    adds zero-score entries for catalog members missing from the matrix."""
    if window is not None:
        deviations = deviations.restrict(window.start, window.end)
    if len(deviations):
        per_instance = np.sqrt(np.square(deviations.values).sum(axis=2)).max(axis=0)
    else:
        per_instance = np.zeros(len(deviations.instances))
    scores = {name: float(score) for name, score in zip(deviations.instances, per_instance)}
    for name in instances or ():
        scores.setdefault(name, 0.0)
    return tuple(sorted(scores.items(), key=lambda item: (-item[1], item[0])))


def top_channels(deviations, cap=TOP_CHANNEL_CAP):
    """Most deviating (instance, channel, score) cells, each scored by its
    maximum over time."""
    if not len(deviations):
        return ()
    peaks = deviations.values.max(axis=0)
    cells = [
        (instance, channel, float(peaks[s, f]))
        for s, instance in enumerate(deviations.instances)
        for f, channel in enumerate(deviations.channels)
        if peaks[s, f] > 0
    ]
    cells.sort(key=lambda cell: (-cell[2], cell[0], cell[1]))
    return tuple(cells[:cap])


# ==================== NUMERICAL FEATURE ====================

@dataclass(frozen=True)
class NumericalFeature:
    window: TimeWindow
    timestamps: tuple
    per_timestamp_score: tuple
    threshold: float
    abnormal_timestamps: tuple
    instance_ranking: tuple
    top_channels: tuple
    preliminary: ExpertOutput
    topology_digest: str = ''
    channel_map: Mapping = field(default_factory=dict)

    def to_payload(self):
        """Plain structure embedded in the numerical expert prompt."""
        return {
            'window': self.window.to_record(),
            'threshold': round(self.threshold, 6),
            'max_score': round(max(self.per_timestamp_score, default=0.0), 6),
            'abnormal_timestamps': list(self.abnormal_timestamps),
            'instance_ranking': [[name, round(score, 6)] for name, score in self.instance_ranking],
            'top_channels': [[name, channel, round(score, 6)] for name, channel, score in self.top_channels],
            'preliminary': self.preliminary.to_record(),
            'topology': self.topology_digest,
            'channel_map': dict(self.channel_map),
        }


def triage_channels(feature, catalog, channel_map=None):
    """Failure types ranked from the channel evidence of the top instance."""
    top = feature.instance_ranking[0][0] if feature.instance_ranking else None
    return rank_types_from_channels(
        feature.top_channels, top, catalog.failure_types, channel_map or feature.channel_map or DEFAULT_CHANNEL_MAP
    )


def build_numerical_feature(model, bundle, k=DEFAULT_MIN_ABNORMAL, scale_factor=1.0,
                            top_cap=TOP_CHANNEL_CAP, topology=None, edge_cap=30,
                            tasks=ALL_TASKS, channel_map=None):
    window = bundle.window
    deviations = deviation(model, bundle.matrix).restrict(window.start, window.end)
    scores = per_timestamp_score(deviations) if len(deviations) else np.zeros(0)
    ad = detect(scores, model, k=k, scale_factor=scale_factor, timestamps=deviations.timestamps)
    ranking = rank_instances(deviations, instances=bundle.catalog.instances)
    cells = top_channels(deviations, cap=top_cap)

    evidence = [
        f'{len(ad.abnormal_timestamps)} of {len(scores)} timestamps score above '
        f'{model.residual_quantile * scale_factor:.3f} (anomalous at >= {k})',
    ]
    if ranking:
        evidence.append('top instances: ' + ', '.join(f'{name} {score:.2f}' for name, score in ranking[:3]))
    if cells:
        evidence.append('top channels: ' + ', '.join(f'{name}/{channel} {score:.2f}' for name, channel, score in cells[:5]))
    if deviations.persistence_pairs:
        evidence.append(f'{len(deviations.persistence_pairs)} unseen series scored with persistence')

    rcl = pad_ranking([name for name, _ in ranking], bundle.catalog.instances)
    preliminary = ExpertOutput(
        ad=ad,
        ft=() if Task.FT in tasks else None,
        rcl=rcl,
        evidence=tuple(evidence),
    ).restricted(tasks)
    implicated = [name for name, _ in ranking[:3]]
    return NumericalFeature(
        window=window,
        timestamps=tuple(deviations.timestamps.tolist()),
        per_timestamp_score=tuple(float(score) for score in scores),
        threshold=model.residual_quantile * scale_factor,
        abnormal_timestamps=ad.abnormal_timestamps,
        instance_ranking=ranking,
        top_channels=cells,
        preliminary=preliminary,
        topology_digest=topology_digest(topology, implicated, edge_cap),
        channel_map=dict(channel_map or DEFAULT_CHANNEL_MAP),
    )
