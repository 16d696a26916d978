"""Few-shot matching engine over precomputed clip-feature sequences.

Similarity matrices between projected clip features are reduced to a
video-to-video score by a matching function (Chamfer and its joint/tuple
extensions, or the Mean/Max/Diagonal/Linear/DTW baselines), scores are
averaged per class and the query is assigned to the best class.
"""

__version__ = "0.1.0"
