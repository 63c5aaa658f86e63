"""
Tests for the semantic view selection toolkit
"""
