"""Command-line entry point and pipeline configuration"""
