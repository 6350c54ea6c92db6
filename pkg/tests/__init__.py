"""Tests for psgel."""
