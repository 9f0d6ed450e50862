"""HTTP service exposing training runs, evaluation, benchmarks and reports."""
from .app import create_app

__all__ = ["create_app"]
