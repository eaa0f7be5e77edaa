"""
Contextrast test suite
"""
