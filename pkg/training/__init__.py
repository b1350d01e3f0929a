# Training loop, checkpoints, inference and gradient checks
