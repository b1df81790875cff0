"""scikit-learn style wrapper around the decision-focused training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .problem import ParametricQp, make_parametric_qp
from .qp_solver import solve_lower
from .trainer import AffineModel, TaskSpec, train

__all__ = ["DecisionFocusedQP"]


class DecisionFocusedQP(BaseEstimator):
    """Affine cost predictor trained through a QP decision layer.

    Decisions are ``y*(x) = argmin ½yᵀQy - q(x)ᵀy`` s.t. ``Gy <= h`` with
    ``q(x) = coef_ @ x + intercept_``. ``fit`` takes features and observed
    cost vectors and minimizes the mean realized cost ``costᵀy*``.

    Parameters
    ----------
    Q, G, h : array-like
        Decision problem data (``Q`` symmetric positive definite).
    oracle : {"ffo", "exact", "smoothed"}
        Hypergradient oracle used during training.
    steps, lr, eps : training schedule and oracle accuracy.
    random_state : int
        Seed for the initial coefficients and batch order.
    """

    def __init__(self, Q, G, h, oracle="ffo", steps=100, lr=0.05, eps=1e-4,
                 batch_size=None, random_state=0):
        self.Q = Q
        self.G = G
        self.h = h
        self.oracle = oracle
        self.steps = steps
        self.lr = lr
        self.eps = eps
        self.batch_size = batch_size
        self.random_state = random_state

    def _problem(self):
        Q = check_array(self.Q, ensure_2d=True)
        d = Q.shape[0]
        G = check_array(self.G, ensure_min_samples=0)
        h = np.asarray(self.h, dtype=float).ravel()
        definition = ParametricQp(Q=Q, P=-np.eye(d), q0=np.zeros(d), G_ineq=G, h0=h,
                            H_x=np.zeros((G.shape[0], d)))
        return make_parametric_qp(definition, name="decision_layer")

    def fit(self, X, Y):
        X, Y = check_X_y(X, Y, multi_output=True, y_numeric=True)
        problem = self._problem()
        Y = Y.reshape(len(Y), -1)
        d, n_feat = problem.dim_y, X.shape[1]
        if Y.shape[1] != d:
            raise ValueError(f"Y has {Y.shape[1]} columns, decision dimension is {d}")
        nW = d * n_feat
        rng = np.random.default_rng(self.random_state)

        def apply(theta, feat):
            return theta[:nW].reshape(d, n_feat) @ feat + theta[nW:]

        task = TaskSpec(
            kind="custom", dataset=list(zip(X, Y)),
            model=AffineModel(dim_theta=nW + d, apply=apply,
                              vjp=lambda feat, g: np.concatenate([np.outer(g, feat).ravel(), g])),
            loss_grad=lambda y, target: (target, float(target @ y)),
            problem_for=lambda i: problem,
            theta0=0.1 * rng.standard_normal(nW + d), batch_size=self.batch_size,
        )
        self.trace_ = train(task, oracle=self.oracle, steps=self.steps, lr=self.lr,
                            eps=self.eps, seed=self.random_state, keep_grads=False)
        theta = self.trace_.theta
        self.coef_ = theta[:nW].reshape(d, n_feat)
        self.intercept_ = theta[nW:].copy()
        self.n_features_in_ = n_feat
        self.problem_ = problem
        return self

    def predict_costs(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.coef_.T + self.intercept_

    def predict(self, X):
        """Decisions ``y*(x)`` for each row of ``X``."""
        return np.array([solve_lower(self.problem_, q).y for q in self.predict_costs(X)])

    def score(self, X, Y):
        """Negative mean realized cost (higher is better)."""
        Y = check_array(Y, ensure_2d=False).reshape(len(Y), -1)
        return -float(np.mean(np.sum(self.predict(X) * Y, axis=1)))
