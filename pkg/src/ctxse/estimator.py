"""Sklearn-style estimator around the frontend model and training loop."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import training
from .datagen import TrainExample
from .features import apply_mask
from .model import ContextBundle, ModelConfig, build_model


class ContextualEnhancer(BaseEstimator, TransformerMixin):
    """Trainable contextual speech enhancer with a fit/predict/transform API.

    fit(X) trains the mask estimator on a sequence of TrainExample scenes;
    predict(X) returns the estimated masks and transform(X) the enhanced
    feature maps. X items may be TrainExamples or (features, bundle) pairs.
    Composes with sklearn tooling: parameters are introspectable via
    get_params and the estimator is clone-able.
    """

    def __init__(self, d_model=64, num_blocks=2, num_cross_blocks=2, num_heads=4,
                 num_channels=128, conv_kernel=15, attn_window=65, pe_mode="none",
                 primary_pe="absolute", ca_variant="proposed", dropout_prob=0.2,
                 optimizer="adam", learning_rate=1e-3, steps=500, batch_size=4,
                 l1_weight=1.0, l2_weight=1.0, seed=0):
        self.d_model = d_model
        self.num_blocks = num_blocks
        self.num_cross_blocks = num_cross_blocks
        self.num_heads = num_heads
        self.num_channels = num_channels
        self.conv_kernel = conv_kernel
        self.attn_window = attn_window
        self.pe_mode = pe_mode
        self.primary_pe = primary_pe
        self.ca_variant = ca_variant
        self.dropout_prob = dropout_prob
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.steps = steps
        self.batch_size = batch_size
        self.l1_weight = l1_weight
        self.l2_weight = l2_weight
        self.seed = seed

    def _model_config(self):
        return ModelConfig(
            num_channels=self.num_channels, d_model=self.d_model,
            num_blocks=self.num_blocks, num_cross_blocks=self.num_cross_blocks,
            num_heads=self.num_heads, conv_kernel=self.conv_kernel,
            attn_window=self.attn_window, pe_mode=self.pe_mode,
            primary_pe=self.primary_pe, ca_variant=self.ca_variant,
            dropout_prob=self.dropout_prob,
        )

    def _train_config(self):
        return training.TrainConfig(
            optimizer=self.optimizer, learning_rate=self.learning_rate,
            steps=self.steps, batch_size=self.batch_size, seed=self.seed,
            l1_weight=self.l1_weight, l2_weight=self.l2_weight,
        )

    def fit(self, X, y=None):
        examples = [self._as_example(item) for item in X]
        self.model_ = build_model(self._model_config(), seed=self.seed)
        self.history_ = training.fit(self.model_, examples, self._train_config())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this ContextualEnhancer is not fitted; call fit first")

    @staticmethod
    def _as_example(item):
        if isinstance(item, TrainExample):
            return item
        raise TypeError(f"fit expects TrainExample items, got {type(item).__name__}")

    @staticmethod
    def _as_pair(item):
        if isinstance(item, TrainExample):
            return item.noisy, item.bundle
        if isinstance(item, tuple) and len(item) == 2:
            features, bundle = item
            if not isinstance(bundle, ContextBundle):
                raise TypeError("second element of a pair must be a ContextBundle")
            return features, bundle
        raise TypeError("items must be TrainExamples or (features, bundle) pairs")

    def predict(self, X):
        """Estimated masks, one (frames, channels) array per item."""
        self._check_fitted()
        return [self.model_.estimate_mask(*self._as_pair(item)) for item in X]

    def transform(self, X):
        """Enhanced feature maps: the estimated mask applied to each input."""
        self._check_fitted()
        out = []
        for item in X:
            features, bundle = self._as_pair(item)
            mask = self.model_.estimate_mask(features, bundle)
            out.append(apply_mask(features, mask))
        return out

    def score(self, X, y=None):
        """Negative mean mask loss over TrainExamples (higher is better)."""
        self._check_fitted()
        with torch.no_grad():
            losses = [
                float(training.example_loss(self.model_, self._as_example(item),
                                            self.l1_weight, self.l2_weight))
                for item in X
            ]
        return -float(np.mean(losses))
