"""
D2HNet: dual-exposure night image restoration.
"""
__version__ = "0.1.0"
