"""Command-line front end: argument parsing, commands and report tables."""
