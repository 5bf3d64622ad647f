"""scikit-learn compatible multi-exit classifier."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .harness import ExitLog, pairwise_disagreement
from .model import ModelConfig, forward, init_model, iter_layers
from .objective import ObjectiveConfig, train
from .strategies import ExitPolicy, decide, parse_policy


class MultiExitClassifier(ClassifierMixin, BaseEstimator):
    """Dense multi-exit network trained with the relevancy + diversity objective.

    Parameters
    ----------
    n_layers : int, default=8
        Number of blocks, each carrying an internal classifier.
    hidden_dim : int, default=16
    head_hidden_dim : int or None, default=None
        Hidden width of each head; ``None`` uses ``hidden_dim``.
    activation : {"relu", "tanh"}, default="relu"
    lam : float, default=0.2
        Weight of the diversity term, in ``[0, 1)``.
    alpha_scheme : {"uniform", "linear"}, default="uniform"
    zero_last_beta : bool, default=False
    adjacent_only : bool, default=False
    stop_gradient : bool, default=True
    epochs : int, default=30
    lr : float, default=1e-2
    batch_size : int, default=32
    exit_policy : str, ExitPolicy or None, default=None
        Used by :meth:`predict`; ``None`` predicts with the deepest head.
    random_state : int, default=42

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : MultiExitModel
    train_result_ : TrainResult
        Loss history and training diagnostics.
    """

    def __init__(
        self,
        n_layers=8,
        hidden_dim=16,
        head_hidden_dim=None,
        activation="relu",
        lam=0.2,
        alpha_scheme="uniform",
        zero_last_beta=False,
        adjacent_only=False,
        stop_gradient=True,
        epochs=30,
        lr=1e-2,
        batch_size=32,
        exit_policy=None,
        random_state=42,
    ):
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.head_hidden_dim = head_hidden_dim
        self.activation = activation
        self.lam = lam
        self.alpha_scheme = alpha_scheme
        self.zero_last_beta = zero_last_beta
        self.adjacent_only = adjacent_only
        self.stop_gradient = stop_gradient
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.exit_policy = exit_policy
        self.random_state = random_state

    def _objective(self):
        return ObjectiveConfig(
            lam=self.lam,
            alpha_scheme=self.alpha_scheme,
            zero_last_beta=self.zero_last_beta,
            adjacent_only=self.adjacent_only,
            stop_gradient=self.stop_gradient,
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("Classifier can't train when only one class is present.")
        seed = int(self.random_state or 0)
        config = ModelConfig(
            input_dim=X.shape[1],
            hidden_dim=self.hidden_dim,
            num_layers=self.n_layers,
            num_classes=len(self.classes_),
            head_hidden_dim=self.head_hidden_dim,
            activation=self.activation,
            seed=seed,
        )
        self.model_ = init_model(config)
        self.train_result_ = train(
            self.model_, X, y_idx, self._objective(),
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=seed,
        )
        return self

    def _policy(self):
        if self.exit_policy is None or isinstance(self.exit_policy, ExitPolicy):
            return self.exit_policy
        return parse_policy(self.exit_policy)

    def predict_layer_proba(self, X):
        """Distributions of every head, shape (n_samples, n_layers, n_classes)."""
        check_is_fitted(self)
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return forward(self.model_, X)

    def predict_proba(self, X):
        """Deepest head's class probabilities."""
        return self.predict_layer_proba(X)[:, -1, :]

    def exit_outcomes(self, X, policy=None):
        """Per-sample :class:`ExitOutcome` under ``policy`` (or ``exit_policy``)."""
        policy = self._policy() if policy is None else policy
        if isinstance(policy, str):
            policy = parse_policy(policy)
        if policy is None:
            raise ValueError("no exit policy given")
        if policy.kind == "oracle" or any(p.kind == "oracle" for p in policy.inner):
            raise ValueError("the oracle needs gold labels; use exitwise.harness.evaluate on an ExitLog")
        return [decide(policy, d) for d in self.predict_layer_proba(X)]

    def predict(self, X):
        check_is_fitted(self)
        policy = self._policy()
        if policy is None:
            return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
        return self.classes_[np.array([o.prediction for o in self.exit_outcomes(X, policy)])]

    def predict_early_exit(self, x, policy=None):
        """Run one sample layer by layer, stopping once the policy fires.

        Returns the predicted class label and the number of layers executed.
        """
        check_is_fitted(self)
        policy = self._policy() if policy is None else policy
        if isinstance(policy, str):
            policy = parse_policy(policy)
        x = validate_data(self, np.asarray(x, dtype=np.float64).reshape(1, -1), reset=False)[0]
        seen = []
        for dist in iter_layers(self.model_, x):
            seen.append(dist)
            out = decide(policy, np.stack(seen))
            if not out.forced_final:
                break
        return self.classes_[out.prediction], out.exit_layer

    def exit_log(self, X, y):
        """Materialise an :class:`ExitLog` with gold labels mapped to class indices."""
        y_idx = np.searchsorted(self.classes_, np.asarray(y))
        return ExitLog(self.predict_layer_proba(X), y_idx)

    def head_disagreement(self, X):
        """Mean pairwise argmax disagreement between heads on ``X``."""
        dists = self.predict_layer_proba(X)
        return pairwise_disagreement(ExitLog(dists, np.zeros(len(dists), dtype=np.int64)))
