"""
Weakly supervised person activity recognition and activity question answering
"""
__version__ = "0.1.0"
