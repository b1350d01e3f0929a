# Evaluation metrics and challenge scores
