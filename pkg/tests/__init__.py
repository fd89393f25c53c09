"""Tests for the refusion_desk package."""
