"""Diagnostic procedures: head similarity, Taylor importance, gradient checking."""

from effvit.analysis.compare import PairedSimilarity, compare_attention_variants
from effvit.analysis.gradcheck import TOY_CASES, GradCheckReport, check_case, gradcheck, rel_error, toy_case
from effvit.analysis.importance import ImportanceReport, channel_scores, taylor_importance
from effvit.analysis.similarity import SimilarityReport, cosine, head_similarity

__all__ = [
    "GradCheckReport", "ImportanceReport", "PairedSimilarity", "SimilarityReport", "TOY_CASES",
    "channel_scores", "check_case", "compare_attention_variants", "cosine", "gradcheck",
    "head_similarity", "rel_error", "taylor_importance", "toy_case",
]
