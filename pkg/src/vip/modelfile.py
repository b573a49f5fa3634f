"""Model persistence.

One JSON document per model, rendered canonically (sorted keys, two-space
indent, no NaN, trailing newline) so identical models serialize to identical
bytes.  The standardized training block rides along because rank-reduced
prediction re-evaluates function draws jointly over train and test inputs.
"""

import json

import numpy as np

from .data import Stats
from .errors import ModelFileError
from .inference import CoefficientPosterior, TrainConfig, TrainedModel
from .priors import prior_from_dict

FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    """Stable rendering used for every JSON artifact this package writes."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": int(model.seed),
        "sigma2": float(model.sigma2),
        "config": model.config.to_dict(),
        "prior": model.prior.to_dict(),
        "q": {
            "mu": [float(v) for v in model.q.mu],
            "chol": model.q.chol.tolist(),
        },
        "stats": None if model.stats is None else model.stats.to_dict(),
        "train": {
            "x": model.train_x.tolist(),
            "y": [float(v) for v in model.train_y],
        },
    }


_REQUIRED = ("format_version", "seed", "sigma2", "config", "prior", "q", "train")


def model_from_dict(d: dict) -> TrainedModel:
    if not isinstance(d, dict):
        raise ModelFileError("model file must contain a JSON object")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise ModelFileError(f"model file missing fields: {', '.join(missing)}")
    if d["format_version"] != FORMAT_VERSION:
        raise ModelFileError(
            f"unsupported format_version {d['format_version']!r}, expected {FORMAT_VERSION}"
        )
    try:
        prior = prior_from_dict(d["prior"])
        q = CoefficientPosterior(d["q"]["mu"], d["q"]["chol"])
        config = TrainConfig.from_dict(d["config"])
        stats = None if d.get("stats") is None else Stats.from_dict(d["stats"])
        train_x = np.asarray(d["train"]["x"], dtype=float)
        train_y = np.asarray(d["train"]["y"], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"malformed model file: {e}") from e
    return TrainedModel(
        prior=prior,
        q=q,
        sigma2=float(d["sigma2"]),
        config=config,
        seed=int(d["seed"]),
        loss_trace=[],
        train_x=train_x,
        train_y=train_y,
        stats=stats,
    )


def save_model(model: TrainedModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(model_to_dict(model)))


def load_model(path: str) -> TrainedModel:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ModelFileError(f"{path}: not valid JSON ({e})") from e
    return model_from_dict(d)
