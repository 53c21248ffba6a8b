"""Map-conditioned change detection on a small numpy autodiff core."""
