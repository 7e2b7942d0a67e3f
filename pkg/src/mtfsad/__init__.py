"""Multi-task feature selection for network anomaly detection.

Flows are reassembled from pcap traces, featurized, labelled from detector
alarm communities, split into chronological tasks, and reduced to a small
feature set with either an l2,1-regularized joint fit or per-task Lasso
before per-task SVM evaluation.
"""

__version__ = "0.1.0"
