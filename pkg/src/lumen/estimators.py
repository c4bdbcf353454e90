"""scikit-learn style wrappers around the enhancer and the classical baselines.

Images are passed as float arrays in [0, 1]:

* ``EnhancerEstimator(stage="pretrain").fit(X, y)`` with ``X`` and ``y`` of
  shape ``[N, H, W]`` (inputs and references);
* ``stage="siamese"``: ``X`` is ``[N, 2, H, W]`` (two conditions of one
  pose) and ``y`` is ``[N, H, W]``;
* ``stage="temporal"``: ``X`` and ``y`` are both ``[N, 2, H, W]`` (two
  consecutive frames and their references).

``transform`` always takes ``[N, H, W]``.  A recurrent model treats the
rows of ``X`` as one sequence in order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .baselines import DEFAULT_CLIP, DEFAULT_TILES, adaptive_he, get_baseline
from .model import DEFAULT_WIDTHS, Enhancer
from .objectives import log_rmse
from .tensor import Tensor
from .train import LEARNING_RATE, Sample, StageOrderError, TrainConfig, fit

_LAYOUT = {"pretrain": (3, 3), "siamese": (4, 3), "temporal": (4, 4)}


def check_images(X, ndim: int = 3, name: str = "X") -> np.ndarray:
    """Validate a stack of grayscale images: finite, in [0, 1], with ``ndim`` axes."""
    arr = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64, input_name=name)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return arr


class EnhancerEstimator(TransformerMixin, BaseEstimator):
    """Train one stage of the enhancer and apply it.

    With ``warm_start=True`` a second ``fit`` continues from the fitted
    model, which is how the later stages build on the earlier ones::

        est = EnhancerEstimator(stage="pretrain").fit(X, y)
        est.set_params(stage="siamese", warm_start=True).fit(X_pairs, y_pairs)
    """

    def __init__(
        self,
        stage: str = "pretrain",
        epochs: int | None = None,
        batch_size: int = 8,
        learning_rate: float = LEARNING_RATE,
        lambda_log: float = 1.0,
        lambda_ssim: float = 0.5,
        widths=DEFAULT_WIDTHS,
        max_iterations: int | None = None,
        seed: int = 0,
        warm_start: bool = False,
    ):
        self.stage = stage
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_log = lambda_log
        self.lambda_ssim = lambda_ssim
        self.widths = widths
        self.max_iterations = max_iterations
        self.seed = seed
        self.warm_start = warm_start

    def _config(self) -> TrainConfig:
        return TrainConfig(
            stage=self.stage,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lambda_log=self.lambda_log,
            lambda_ssim=self.lambda_ssim,
            seed=self.seed,
            max_iterations=self.max_iterations,
            widths=tuple(self.widths),
        )

    def _samples(self, X, y) -> list[Sample]:
        if y is None:
            raise ValueError("y (reference images) is required")
        xd, yd = _LAYOUT[self.stage]
        X = check_images(X, xd, "X")
        y = check_images(y, yd, "y")
        if len(X) != len(y):
            raise ValueError(f"X and y hold different numbers of samples: {len(X)} vs {len(y)}")
        if self.stage == "pretrain":
            return [Sample((a, b)) for a, b in zip(X, y)]
        if self.stage == "siamese":
            return [Sample((a[0], a[1], b)) for a, b in zip(X, y)]
        return [Sample((a[0], a[1], b[0], b[1])) for a, b in zip(X, y)]

    def _start_model(self) -> Enhancer:
        if self.warm_start and hasattr(self, "model_"):
            model = self.model_
            if self.stage == "temporal" and not model.recurrent:
                model = model.with_recurrent(self.seed)
            return model
        if self.stage != "pretrain":
            raise StageOrderError(f"stage {self.stage!r} needs a fitted model; fit the earlier stage with warm_start=True")
        return Enhancer(tuple(self.widths), seed=self.seed)

    def fit(self, X, y=None):
        cfg = self._config()
        samples = self._samples(X, y)
        result = fit(self._start_model(), samples, cfg)
        self.model_ = result.model
        self.log_ = result.log
        self.n_iter_ = result.iterations
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, 3, "X")
        self.model_.check_input((len(X), 1) + X.shape[1:])
        if self.model_.recurrent:
            return np.stack(self.model_.enhance_sequence(list(X)))
        return np.stack([self.model_.enhance(x)[0] for x in X])

    def score(self, X, y):
        """Negative mean log-RMSE of the transformed images against ``y``."""
        out = self.transform(X)
        y = check_images(y, 3, "y")
        return -float(np.mean([log_rmse(Tensor(a), Tensor(b)).item() for a, b in zip(out, y)]))


class BaselineTransformer(TransformerMixin, BaseEstimator):
    """Stateless wrapper for ``norm``, ``ghe`` and ``ahe``."""

    def __init__(self, method: str = "ghe", tiles=DEFAULT_TILES, clip_limit: float = DEFAULT_CLIP):
        self.method = method
        self.tiles = tiles
        self.clip_limit = clip_limit

    def fit(self, X, y=None):
        check_images(X, 3, "X")
        get_baseline(self.method)
        return self

    def transform(self, X):
        X = check_images(X, 3, "X")
        fn = get_baseline(self.method)
        if fn is adaptive_he:
            return np.stack([adaptive_he(x, self.tiles, self.clip_limit) for x in X])
        return np.stack([fn(x) for x in X])
