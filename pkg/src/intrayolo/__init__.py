"""Small-lesion detection: patch training, sliced inference and gated
teacher-student distillation, with a synthetic stand-in dataset."""

__version__ = "0.1.0"
