"""
检索增强代码补全引擎应用包
"""

__version__ = "1.0.0"
