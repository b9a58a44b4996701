"""Python access to the contrastive reconstruction pre-training library."""

import json

from ._core import (
    Codebook,
    ContractError,
    DimensionError,
    Error,
    FormatError,
    InsufficientDataError,
    Model,
    ParseError,
    ValidationError,
    gradcheck,
    infonce_loss,
    make_synthetic,
    masked_count,
    reconstruction_loss,
    run_cli,
    sample_mask,
    synthetic_class_names,
)
from . import _core


def default_config():
    return json.loads(_core.default_config())


def resolve_config(config, overrides=()):
    """Validated config dict; `config` may be a dict or a JSON string."""
    text = config if isinstance(config, str) else json.dumps(config)
    return json.loads(_core.resolve_config(text, list(overrides)))


def compute_metrics(predictions, labels, num_classes):
    return json.loads(_core.compute_metrics(predictions, labels, num_classes))


def linear_probe(train_features, train_labels, test_features, test_labels, num_classes,
                 epochs=50, lr=1e-3, seed=0):
    """Returns (test metrics, train metrics) as dicts."""
    test, train = _core.linear_probe(train_features, train_labels, test_features, test_labels,
                                     num_classes, epochs, lr, seed)
    return json.loads(test), json.loads(train)
