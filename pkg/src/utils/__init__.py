"""
Utility modules shared by the view selection toolkit: errors and logging
"""
