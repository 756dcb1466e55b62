"""Core business logic layer."""
