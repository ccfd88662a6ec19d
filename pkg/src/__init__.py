"""Essential exogenous node identification for causal sufficiency"""
__version__ = "1.0.0"
