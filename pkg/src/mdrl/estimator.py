"""scikit-learn compatible wrapper around the trainer."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autograd as ag
from ._validation import check_images, check_label_grid, infer_num_classes
from .bank import BankConfig, SinkhornParams
from .config import ModelSettings, OptimConfig, TrainConfig
from .data import ConfusionMatrix, Sample, SynthSpec, accumulate, miou
from .losses import LossConfig
from .pipeline import forward
from .trainer import _to_channels_last, fit, init_state, predict_scores


class MDRLSegmenter(BaseEstimator):
    """Semantic segmenter with a class-level multi-distribution memory bank.

    ``X`` is an array of images shaped (n_samples, D_in, H, W) and ``y`` the
    matching (n_samples, H, W) integer label grids; ``ignore_label`` marks
    pixels excluded from training and scoring.

    Parameters mirror :class:`mdrl.config.TrainConfig`; ``random_state``
    seeds parameter init, bank init and batch shuffling.
    """

    def __init__(
        self,
        n_dist=9,
        embed_dim=16,
        hidden_dim=32,
        key_dim=None,
        stride=1,
        use_ssa=False,
        sinkhorn_lambda=0.05,
        sinkhorn_iters=3,
        momentum=0.999,
        warmup=0,
        tau=0.5,
        eta=0.4,
        alpha=0.01,
        beta=0.05,
        learning_rate=0.05,
        poly_power=0.9,
        weight_decay=0.0,
        sgd_momentum=0.0,
        epochs=30,
        batch_size=8,
        random_state=0,
        dtype="float32",
        ignore_label=255,
    ):
        self.n_dist = n_dist
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.key_dim = key_dim
        self.stride = stride
        self.use_ssa = use_ssa
        self.sinkhorn_lambda = sinkhorn_lambda
        self.sinkhorn_iters = sinkhorn_iters
        self.momentum = momentum
        self.warmup = warmup
        self.tau = tau
        self.eta = eta
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.poly_power = poly_power
        self.weight_decay = weight_decay
        self.sgd_momentum = sgd_momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.dtype = dtype
        self.ignore_label = ignore_label

    def to_config(self, in_dim=8, num_classes=4, height=32, width=32):
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            data=SynthSpec(
                num_classes=num_classes,
                input_dim=in_dim,
                height=height,
                width=width,
                blob_size=(1, min(height, width)),
            ),
            model=ModelSettings(self.embed_dim, self.hidden_dim, self.key_dim, None, self.stride, self.use_ssa),
            n_dist=self.n_dist,
            sinkhorn=SinkhornParams(self.sinkhorn_lambda, self.sinkhorn_iters),
            bank=BankConfig(self.momentum, seed, self.warmup),
            loss=LossConfig(self.eta, self.alpha, self.beta, self.tau, self.ignore_label),
            optim=OptimConfig(
                self.learning_rate, self.poly_power, self.weight_decay, self.sgd_momentum, self.epochs, self.batch_size
            ),
            model_seed=seed,
            shuffle_seed=seed,
            dtype=self.dtype,
        )

    def fit(self, X, y, eval_set=None):
        X = check_images(X)
        y = check_label_grid(y, X, self.ignore_label)
        n_classes = infer_num_classes(y, self.ignore_label)
        config = self.to_config(X.shape[1], n_classes, X.shape[2], X.shape[3])
        samples = [Sample(xi, yi, n_classes) for xi, yi in zip(X, y)]
        eval_samples = None
        if eval_set is not None:
            Xe = check_images(eval_set[0])
            ye = check_label_grid(eval_set[1], Xe, self.ignore_label, n_classes)
            eval_samples = [Sample(xi, yi, n_classes) for xi, yi in zip(Xe, ye)]
        state = init_state(config, X.shape[1], n_classes)
        self.state_, self.history_ = fit(config, samples, eval_samples, state=state)
        self.n_classes_ = n_classes
        self.n_features_in_ = X.shape[1]
        self.bank_ = self.state_.bank
        return self

    def _check_input(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} channels, the model was fit with {self.n_features_in_}")
        return X

    def decision_function(self, X):
        """Class scores of shape (n_samples, C, H, W)."""
        X = self._check_input(X)
        out = [predict_scores(self.state_, X[i:i + 1]) for i in range(len(X))]
        return np.concatenate(out).transpose(0, 3, 1, 2)

    def predict_proba(self, X):
        scores = self.decision_function(X)
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1).astype(np.uint8)

    def transform(self, X):
        """Augmented pixel representations, shaped (n_samples, Z, H', W')."""
        X = self._check_input(X)
        st = self.state_
        use_bank = st.step >= st.config.bank.warmup_steps
        out = []
        for i in range(len(X)):
            fw = forward(st.params, _to_channels_last(X[i:i + 1], st.np_dtype), st.bank, st.model_config, use_bank)
            out.append(fw.r_aug.data)
        return np.concatenate(out).transpose(0, 3, 1, 2)

    def embed(self, X):
        """Unit-norm pixel embeddings (n_samples, Z, H', W') that the bank is built from."""
        X = self._check_input(X)
        st = self.state_
        out = []
        for i in range(len(X)):
            fw = forward(st.params, _to_channels_last(X[i:i + 1], st.np_dtype), st.bank, st.model_config)
            out.append(ag.l2_normalize(fw.r, axis=-1).data)
        return np.concatenate(out).transpose(0, 3, 1, 2)

    def score(self, X, y):
        """Mean intersection-over-union of the predictions."""
        X = self._check_input(X)
        y = check_label_grid(y, X, self.ignore_label, self.n_classes_)
        conf = accumulate(ConfusionMatrix(self.n_classes_), self.predict(X), y, self.ignore_label)
        return miou(conf)[1]
