"""
DCDNet - Services
"""
