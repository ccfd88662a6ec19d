"""Ground-truth structural causal models for synthetic datasets"""
