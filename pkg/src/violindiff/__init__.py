"""Two-stage diffusion violin synthesis with explicit pitch-bend modeling.

Stage 1 samples a polyphonic bend roll from note rolls via masked diffusion;
stage 2 synthesizes a mel spectrogram conditioned on the full roll set and a
performer embedding. Includes a synthetic violin corpus generator and the
evaluation suite (FAD groupings, vibrato F1, Perf-MAE).
"""

__version__ = "0.1.0"
