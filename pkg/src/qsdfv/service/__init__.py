"""Request/response models and the HTTP service wrapping the core package."""
