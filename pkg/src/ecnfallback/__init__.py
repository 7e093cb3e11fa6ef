# ecnfallback/__init__.py
version = "0.1.0"
