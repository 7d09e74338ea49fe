"""Natural-language search over stripped-binary pseudocode.

Two stages: a trainable linear embedder with exact cosine retrieval, then
a linear reranker that reads the candidate together with a few of its
callees. The package also carries the data tooling around them: lexical
extraction and filters, MinHash dedup, a pair sampler with hard-negative
mining, benchmark builders and Rec@k / MRR@k evaluation.
"""

__version__ = "0.1.0"
