"""Input convex neural networks: models, inference, training, and experiments."""
