"""Desk-scale world-model RL: anchored flow dynamics, keyframe restarts, grouped policy updates."""

__version__ = "0.1.0"
