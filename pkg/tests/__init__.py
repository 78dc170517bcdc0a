"""
Unit tests for the hand distillation laboratory.
"""
