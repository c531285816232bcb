"""Quality assessment for panoramic images with localized distortions.

Library layout:
    projection   equirectangular to gnomonic viewport extraction
    distortion   synthetic distortion bank, pseudo-MOS, dataset generation
    backbone     hierarchical multiscale feature extractor
    selection    multitask cross-resolution feature selection
    attention    viewport / spatial / channel gates
    heads        auxiliary classification branches
    fusion       quality regression branch with cross-task fusion
    model        full network assembly
    training     losses, uncertainty weighting, train loop
    metrics      logistic remap, correlation metrics, evaluation reports
    figures      report figure rendering
    cli          gen-data / train / eval / ablate commands
"""

__version__ = "0.1.0"
