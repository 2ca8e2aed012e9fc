"""Self-supervised SfM with learned intrinsics."""
