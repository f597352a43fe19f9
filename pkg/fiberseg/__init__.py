# fiberseg/__init__.py

"""Сегментация волокон в микротомографических объёмах"""

__version__ = "1.0.0"
