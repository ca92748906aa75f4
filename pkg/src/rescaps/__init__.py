"""Deep capsule networks with residual connections.

Library layout:
    autodiff  - tensors and reverse-mode differentiation
    routing   - the three dynamic routing algorithms (rba, sda, em)
    layers    - capsule layers, residual blocks, model builder, checkpoints
    losses    - margin/reconstruction objective and the Adam optimizer
    data      - dataset loading (IDX + canonical container), augmentation
    train     - single training runs and evaluation
    sweep     - depth sweeps over datasets/routers/seeds
    report    - accuracy-vs-depth series CSVs and figures
    cli       - the `rescaps` command line entry point
"""

__version__ = "0.1.0"
