"""
DCDNet - Utilities
"""
