"""Command-line front end."""

