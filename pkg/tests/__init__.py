"""Test package for exonodes"""
