# Dataset manifests, merging, sampling and synthetic data
