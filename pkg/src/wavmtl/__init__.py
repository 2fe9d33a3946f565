"""Multi-task voice-activated-task training on a miniature self-supervised speech backbone."""
__version__ = "0.1.0"
