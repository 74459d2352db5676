"""Test suite root for SEFI@Home.

All tests are discovered by pytest from this package and its subpackages.
"""
