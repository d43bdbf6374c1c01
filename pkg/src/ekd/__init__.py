"""Two-stream knowledge distillation with an online-trained teacher, on a small numpy autograd engine."""

__version__ = "0.1.0"
