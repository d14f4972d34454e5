"""APK transformation and antivirus-engine probing toolkit."""

__version__ = "0.1.0"
