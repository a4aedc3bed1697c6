"""Test suite for retrowpt."""
