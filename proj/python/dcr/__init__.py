"""Python front end for the DCR core.

Configuration dictionaries use the same schema as the JSON experiment specs
read by the ``dcr`` command-line tool.
"""

import json

from ._dcr import (
    ConfigError,
    DataError,
    Dataset,
    Model,
    NumericError,
    __version__,
    compute_propensities,
    gini_index,
    load_checkpoint,
    rank_metrics,
    read_dataset,
    preprocess_file,
    sample_negatives,
    significance_test,
)
from . import _dcr

__all__ = [
    "ConfigError", "DataError", "NumericError", "Dataset", "Model", "__version__",
    "compute_propensities", "gini_index", "load_checkpoint", "rank_metrics", "read_dataset",
    "preprocess_file", "sample_negatives", "significance_test", "load_dataset", "make_model",
    "fit", "evaluate", "canonical_spec", "run_experiment", "format_table", "plot",
]


def _dump(spec):
    return json.dumps(spec or {})


def load_dataset(spec=None):
    """Dataset named by ``spec["dataset"]`` (synthetic by default)."""
    return _dcr.load_dataset(_dump(spec))


def make_model(spec, dataset):
    return Model(_dump(spec), dataset.num_items, dataset.num_users)


def fit(model, dataset, spec=None):
    """Trains with early stopping; returns the per-epoch log."""
    return _dcr.fit(model, dataset, _dump(spec))


def evaluate(model, dataset, split="test", spec=None):
    return _dcr.evaluate(model, dataset, split, _dump(spec))


def canonical_spec(spec=None):
    return json.loads(_dcr.canonical_spec(_dump(spec)))


def run_experiment(spec):
    return json.loads(_dcr.run_experiment(_dump(spec)))


def format_table(table):
    return _dcr.format_table(json.dumps(table))


def plot(table, kind, out):
    _dcr.plot(json.dumps(table), kind, str(out))
