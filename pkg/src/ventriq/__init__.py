"""Quality-gated bi-ventricular shape-model segmentation and cardiac function reference ranges."""

__version__ = "0.1.0"
FORMAT_VERSIONS = {"volume": 1, "points": 1, "pdm": 1, "iam": 2, "rf": 1}
