"""Two-stage CRF constituency parsing over batched span charts."""

from treecrf.chart import cky, inside, marginals, mbr_decode
from treecrf.parser import Parser
from treecrf.scorer import Scorer, ScorerConfig
from treecrf.treebank import Tree, evalb_score, parse_bracketed, render_bracketed

__all__ = ["Parser", "Scorer", "ScorerConfig", "Tree", "cky", "evalb_score", "inside",
           "marginals", "mbr_decode", "parse_bracketed", "render_bracketed"]
__version__ = "0.1.0"
