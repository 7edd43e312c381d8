"""Two-stage multilingual text-image alignment: teacher learning, then locked-image contrastive tuning."""

__version__ = "0.1.0"
