"""Kernel tests, screening, skeleton search, CCI selection and the pipeline"""
