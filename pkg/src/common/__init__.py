"""Shared errors, logging and seeding helpers"""
__version__ = "1.0.0"
