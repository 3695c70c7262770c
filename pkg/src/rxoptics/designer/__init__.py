"""Two-step design: prescription lens, then the folded AR display path."""
