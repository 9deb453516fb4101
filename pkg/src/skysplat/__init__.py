"""skysplat: physics-guided dynamic Gaussian splatting for monocular aerial video.

Library layout:

    liealg      SO(3)/SE(3) exp/log maps and twist splines
    scene       Gaussian scene model, object poses, composition
    appearance  shared appearance field (hash grid + SH + temporal codes)
    render      differentiable projection + tile rasterizer, forward/backward
    metrics     PSNR / SSIM / Dyn-PSNR
    lift        monocular geometry lifting from frame bundles
    optim       loss terms, schedules, Adam, the training loop
    synthgen    synthetic aerial generator and ground-truth oracle
    sceneio     file formats (scene files, frame bundles, configs, checkpoints)
    cli         command-line pipeline (synth / lift / train / render / eval)
"""

__version__ = "0.1.0"
