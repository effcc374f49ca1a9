"""Privacy-aware placement of per-feature-map CNN inference on IoT devices."""
