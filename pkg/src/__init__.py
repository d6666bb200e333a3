"""Integrated Laplace approximation with adjoint hyperparameter gradients."""
