"""Zero-shot glyph recognition with a pseudo-siamese network.

Modules:
    diffcore    numpy reverse-mode autodiff with the operators the network needs
    glyphs      synthetic radical atlas, characters, renders, splits, dataset I/O
    network     pre-activation residual backbone, extra-thinking cell, heads
    losses      embedding regression, category, center and radical-count losses
    trainer     pair batches, optimization loop, checkpoints, training logs
    inference   embedding bank, L1 nearest-neighbour recognition, evaluation
    protocols   sweeps, ablations, complexity report
    cli         ``glyphzero`` command line
"""

__version__ = "0.1.0"
