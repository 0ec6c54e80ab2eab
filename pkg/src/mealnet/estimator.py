"""scikit-learn style wrapper: fit on annotated samples, predict on RGB images."""
from __future__ import annotations

import numbers

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import MetricsReport, evaluate
from .model import ModelConfig
from .model.network import to_input
from .trainer import TrainConfig, build_model, load_model, save_checkpoint, train
from .validation import check_images, check_samples, check_scalar


class MealAssessor(BaseEstimator):
    """Recognize, segment and measure food items.

    ``fit`` trains the multi-task network; ``predict`` returns one
    ``NetworkOutputs`` per image with depth maps and detections (class,
    score, box, mask, volume in mL). ``model_params`` sets any other
    ``ModelConfig`` field, e.g. a smaller ``input_size``.
    """

    def __init__(self, iterations=5000, learning_rate=1e-3, batch_size=2, seed=0, flips=True,
                 fpn_channels=64, volume_head_width=256, model_params=None, checkpoint_dir=None):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.flips = flips
        self.fpn_channels = fpn_channels
        self.volume_head_width = volume_head_width
        self.model_params = model_params
        self.checkpoint_dir = checkpoint_dir

    def _configs(self):
        check_scalar(self.iterations, "iterations", numbers.Integral, min_val=1)
        check_scalar(self.learning_rate, "learning_rate", min_val=0, include_min=False)
        check_scalar(self.batch_size, "batch_size", numbers.Integral, min_val=1)
        check_scalar(self.fpn_channels, "fpn_channels", numbers.Integral, min_val=1)
        extra = dict(self.model_params or {})
        clash = {"fpn_channels", "volume_head_width"} & set(extra)
        if clash:
            raise ValueError(f"set {sorted(clash)} through the estimator parameters, not model_params")
        model_cfg = ModelConfig.from_dict({**extra, "fpn_channels": self.fpn_channels,
                                           "volume_head_width": self.volume_head_width})
        train_cfg = TrainConfig(
            total_iterations=self.iterations, lr_initial=self.learning_rate, batch_size=self.batch_size,
            seed=self.seed, flip_lr=self.flips, flip_ud=self.flips,
            checkpoint_every=1000 if self.checkpoint_dir else 0,
        )
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        """Train on a sequence of ``Sample`` objects (``y`` is unused; annotations live in the samples)."""
        model_cfg, train_cfg = self._configs()
        samples = check_samples(X, model_cfg.input_size)
        model = build_model(model_cfg, self.seed)
        self.train_state_ = train(model, samples, train_cfg, out_dir=self.checkpoint_dir)
        model.eval()
        self.model_ = model
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        images = check_images(X, self.model_.config.input_size)
        self.model_.eval()
        return [self.model_.forward_infer(to_input(im))[0] for im in images]

    def predict_volumes(self, X) -> list:
        """Per image, a list of ``(class_id, volume_ml)`` pairs."""
        return [[(d.class_id, d.volume_ml) for d in out.detections] for out in self.predict(X)]

    def evaluate(self, X, regime: str = "full") -> MetricsReport:
        samples = check_samples(X)
        return evaluate(self.predict(samples), samples, regime)

    def score(self, X, y=None) -> float:
        """Mask AP at IoU 0.5, as a fraction."""
        return self.evaluate(X).ap50 / 100.0

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, None, self.train_state_, self._configs()[1])

    @classmethod
    def load(cls, path) -> "MealAssessor":
        from .trainer import TrainState, read_checkpoint

        payload = read_checkpoint(path)
        tc = payload["train_config"]
        mc = payload["model_config"]
        est = cls(iterations=tc["total_iterations"], learning_rate=tc["lr_initial"], batch_size=tc["batch_size"],
                  seed=tc["seed"], flips=tc["flip_lr"], fpn_channels=mc["fpn_channels"],
                  volume_head_width=mc["volume_head_width"],
                  model_params={k: v for k, v in mc.items() if k not in ("fpn_channels", "volume_head_width")})
        est.model_ = load_model(path).eval()
        est.train_state_ = TrainState(**payload["state"])
        return est
