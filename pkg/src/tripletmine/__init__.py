"""Triplet mining engine for instruction-based image editing data.

Drives black-box generator, editor, and validator endpoints through a
multi-stage filtering pipeline to mine ⟨source image, instruction, edited
image⟩ triplets, expands the result by semantic inversion and bootstrap
composition, and ships the calibration math needed to qualify a validator.
"""

__version__ = "0.1.0"
