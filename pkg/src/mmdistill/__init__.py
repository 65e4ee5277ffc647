"""Multi-teacher cross-modal distillation into an audio detector, at desk scale."""

__version__ = "0.1.0"
