"""Numpy autodiff engine, windowed-attention layers and the two-stage model."""
