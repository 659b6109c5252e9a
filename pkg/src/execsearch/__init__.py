"""VBSiX: beam search in execution space with an actor-critic score, for SCONE-style
instruction-to-program learning from final-world supervision."""

__version__ = "0.1.0"
