"""Utility modules for the Layout Lab: I/O, random streams and reports."""
