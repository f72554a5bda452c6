"""HTTP service: inference endpoints and the annotation review store."""
