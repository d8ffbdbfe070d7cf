"""ragmark: a modular benchmarking harness for retrieval-augmented generation.

Pipeline stages (query transforms, retrieval, post-processing, generation) are
composable and provider-agnostic; three evaluator families (retrieval ranking
metrics, text generation metrics, LLM-judge metrics) score the results; five
failure-diagnosis protocols stress specific weaknesses. Deterministic stub
providers make every run reproducible offline.
"""

__version__ = "0.1.0"
