"""Captioning driving scenes from a camera image plus the planned trajectory.

Modules: ``geometry`` (frames, projection), ``raster`` (trajectory images),
``tensor``/``nn`` (numpy autodiff), ``encoders`` (fusion variants),
``captioner`` (Q-Former-lite + decoder), ``metrics``, ``dataset``, ``cli``.
"""
