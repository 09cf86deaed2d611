"""Shared pytest configuration.

The presence of this file also puts the tests directory on sys.path so
test modules can import the shared `oracles` helpers.
"""
