"""Model zoo: four classifier and four regressor baselines behind one
train/predict contract.

Families
    linear    logistic regression (cls) / ridge (reg), on robust-scaled inputs
    hist_gbt  histogram gradient-boosted trees (logistic / Huber delta=10)
    rf        random forests (Gini / variance; sqrt-d and d/3 feature draws)
    mlp       torch MLP (512/256/128/64, BatchNorm, Adam 1e-3, early stop 20)

Only the linear family sees robust scaling; tree ensembles and the MLP
consume raw feature values. Training is deterministic given (spec, seed,
table): bit-exact for trees and linear models, within float tolerance for
the MLP on one platform.
"""

from __future__ import annotations

import io
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..features import RobustScaleParams, apply_robust_scale, fit_robust_scale
from .gbt import HistGBT, huber_loss

FAMILIES = ("linear", "hist_gbt", "rf", "mlp")
TASKS = ("cls", "reg")

MODEL_BLOB_FORMAT = 1

_DEFAULTS = {
    ("linear", "cls"): {"C": 1.0, "max_iter": 1000, "tol": 1e-6},
    ("linear", "reg"): {"alpha": 1.0},
    ("hist_gbt", "cls"): {"max_depth": 6, "n_iter": 200, "learning_rate": 0.1,
                          "max_bins": 256, "min_samples_leaf": 20},
    ("hist_gbt", "reg"): {"max_depth": 6, "n_iter": 200, "learning_rate": 0.1,
                          "max_bins": 256, "min_samples_leaf": 20, "huber_delta": 10.0},
    ("rf", "cls"): {"n_estimators": 200, "max_depth": 12, "min_samples_leaf": 5,
                    "max_features": "sqrt", "bootstrap": True},
    ("rf", "reg"): {"n_estimators": 200, "max_depth": 12, "min_samples_leaf": 5,
                    "max_features": 1.0 / 3.0, "bootstrap": True},
    ("mlp", "cls"): {"hidden": (512, 256, 128, 64), "lr": 1e-3, "batch_size": 4096,
                     "max_epochs": 500, "patience": 20, "val_fraction": 0.1,
                     "pos_weight": "auto"},
    ("mlp", "reg"): {"hidden": (512, 256, 128, 64), "lr": 1e-3, "batch_size": 4096,
                     "max_epochs": 500, "patience": 20, "val_fraction": 0.1,
                     "huber_delta": 10.0},
}


class SingleClassError(ValueError):
    """Classification training set contains only one class."""


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model configuration; params default to the pinned table
    values and are individually overridable."""

    task: str
    family: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        merged = dict(_DEFAULTS[(self.family, self.task)])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown params for {self.family}/{self.task}: {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)


@dataclass
class TrainedModel:
    """Opaque fitted predictor; rejects inputs of the wrong width."""

    spec: ModelSpec
    input_dim: int
    state: object
    scale: RobustScaleParams | None = None

    @property
    def task(self) -> str:
        return self.spec.task

    def _check(self, x: np.ndarray, task: str) -> np.ndarray:
        if self.task != task:
            raise ValueError(f"model task is {self.task!r}, not {task!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected (n, {self.input_dim}) input, got {x.shape}")
        if self.scale is not None:
            x = apply_robust_scale(self.scale, x)
        return x

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Positive-class probability per row (cls task only)."""
        x = self._check(x, "cls")
        fam = self.spec.family
        if fam == "linear" or fam == "rf":
            return self.state.predict_proba(x)[:, 1]
        if fam == "hist_gbt":
            return self.state.predict_proba(x)
        return 1.0 / (1.0 + np.exp(-np.clip(self.state.raw_scores(x), -60, 60)))

    def predict_density(self, x: np.ndarray) -> np.ndarray:
        """Raw real-valued sub-pixel count prediction (reg task only); any
        clamping to [0, 289] is the full-scene mapper's job."""
        x = self._check(x, "reg")
        fam = self.spec.family
        if fam in ("linear", "rf"):
            return self.state.predict(x)
        if fam == "hist_gbt":
            return self.state.predict(x)
        return self.state.raw_scores(x).astype(np.float64)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        """Raw model score: logit/margin for cls, prediction for reg. The
        linear family's score is exactly linear in the *unscaled* input."""
        x = self._check(x, self.task)
        fam = self.spec.family
        if fam == "linear":
            if self.task == "cls":
                return self.state.decision_function(x)
            return self.state.predict(x)
        if fam == "hist_gbt":
            return self.state.decision_function(x)
        if fam == "rf":
            return self.state.predict_proba(x)[:, 1] if self.task == "cls" else self.state.predict(x)
        return self.state.raw_scores(x).astype(np.float64)

    def linear_coefficients(self) -> tuple[np.ndarray, float]:
        """(w, b) with decision_function(x) = w . x + b on raw inputs
        (internal scaling folded in). Linear family only."""
        if self.spec.family != "linear":
            raise ValueError("linear coefficients exist only for the linear family")
        raw_w = self.state.coef_.ravel().astype(np.float64)
        raw_b = float(np.ravel(self.state.intercept_)[0])
        div = self.scale.divisor
        w = raw_w / div
        b = raw_b - float(np.dot(raw_w, self.scale.median / div))
        return w, b


def train(spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> TrainedModel:
    """Fit one model. y is y_cls (0/1) for cls, y_reg (sub-pixel counts) for reg."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, d) with matching y")
    if len(x) < 2:
        raise ValueError("need at least 2 training rows")
    if not np.isfinite(x).all():
        raise ValueError("non-finite feature values in training rows")
    if spec.task == "cls":
        classes = np.unique(y)
        if classes.size < 2:
            raise SingleClassError(f"single-class training set (class {classes[0]})")

    p = spec.params
    scale = None
    if spec.family == "linear":
        scale = fit_robust_scale(x)
        xs = apply_robust_scale(scale, x)
        if spec.task == "cls":
            from sklearn.linear_model import LogisticRegression

            est = LogisticRegression(
                penalty="l2", C=p["C"], max_iter=p["max_iter"], tol=p["tol"], solver="lbfgs"
            ).fit(xs, y.astype(int))
        else:
            from sklearn.linear_model import Ridge

            est = Ridge(alpha=p["alpha"]).fit(xs, y)
        return TrainedModel(spec=spec, input_dim=x.shape[1], state=est, scale=scale)

    if spec.family == "hist_gbt":
        kwargs = dict(
            n_iter=p["n_iter"], learning_rate=p["learning_rate"], max_depth=p["max_depth"],
            max_bins=p["max_bins"], min_samples_leaf=p["min_samples_leaf"],
        )
        if spec.task == "cls":
            est = HistGBT(loss="logistic", **kwargs).fit(x, y)
        else:
            est = HistGBT(loss="huber", huber_delta=p["huber_delta"], **kwargs).fit(x, y)
        return TrainedModel(spec=spec, input_dim=x.shape[1], state=est)

    if spec.family == "rf":
        kwargs = dict(
            n_estimators=p["n_estimators"], max_depth=p["max_depth"],
            min_samples_leaf=p["min_samples_leaf"], max_features=p["max_features"],
            bootstrap=p["bootstrap"], random_state=spec.seed, n_jobs=1,
        )
        if spec.task == "cls":
            from sklearn.ensemble import RandomForestClassifier

            est = RandomForestClassifier(criterion="gini", **kwargs).fit(x, y.astype(int))
        else:
            from sklearn.ensemble import RandomForestRegressor

            est = RandomForestRegressor(criterion="squared_error", **kwargs).fit(x, y)
        return TrainedModel(spec=spec, input_dim=x.shape[1], state=est)

    from .mlp import train_mlp

    mlp_kwargs = {k: v for k, v in p.items()}
    mlp_kwargs["hidden"] = tuple(mlp_kwargs["hidden"])
    est = train_mlp(x, y, task=spec.task, seed=spec.seed, **mlp_kwargs)
    return TrainedModel(spec=spec, input_dim=x.shape[1], state=est)


def predict_proba(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    return model.predict_proba(x)


def predict_density(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    return model.predict_density(x)


# ---------------------------------------------------------------------------
# Versioned binary blobs for the full-scene mapper
# ---------------------------------------------------------------------------

def save_model(model: TrainedModel, path: str | Path) -> None:
    payload = {"format": MODEL_BLOB_FORMAT, "model": model}
    buf = io.BytesIO()
    pickle.dump(payload, buf, protocol=pickle.HIGHEST_PROTOCOL)
    Path(path).write_bytes(buf.getvalue())


def load_model(path: str | Path) -> TrainedModel:
    payload = pickle.loads(Path(path).read_bytes())
    if payload.get("format") != MODEL_BLOB_FORMAT:
        raise ValueError(f"unsupported model blob format {payload.get('format')!r}")
    return payload["model"]


__all__ = [
    "FAMILIES", "TASKS", "ModelSpec", "TrainedModel", "SingleClassError",
    "train", "predict_proba", "predict_density", "save_model", "load_model",
    "HistGBT", "huber_loss",
]
