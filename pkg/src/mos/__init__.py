"""Multiple object stitching for self-supervised ViT pretraining."""
