"""Tests for ecnfallback."""
