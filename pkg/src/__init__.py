"""
Few-shot black-box optimization by synthetic pretraining
"""

__version__ = "0.1.0"
