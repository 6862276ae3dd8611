"""Tests for stratfit."""
