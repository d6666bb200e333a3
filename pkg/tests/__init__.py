"""Tests for the Laplace adjoint package."""
