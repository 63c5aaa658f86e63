"""
Semantic View Selection toolkit
Monte-Carlo semantic view scoring, score regression and view selector evaluation
"""

__version__ = "0.1.0"
__author__ = "Robotics Perception Team"
