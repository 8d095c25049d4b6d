"""Static HTML heatmaps of token scores (white = 0, blue = 1)."""

from __future__ import annotations

import html

import numpy as np

_PAGE = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>{title}</title>
<style>
body {{ font-family: sans-serif; line-height: 2.2; margin: 2em; }}
.s {{ margin-bottom: 0.6em; }}
.t {{ padding: 0.15em 0.3em; border-radius: 3px; }}
.meta {{ color: #666; font-size: 0.8em; margin-right: 0.8em; }}
</style></head><body>
<h1>{title}</h1>
{body}
</body></html>
"""


def minmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    span = s.max() - s.min()
    if span == 0:
        return np.zeros_like(s)
    return (s - s.min()) / span


def token_color(intensity: float) -> str:
    """Linear blend from white (0) to pure blue (1)."""
    x = min(1.0, max(0.0, float(intensity)))
    rg = round(255 * (1.0 - x))
    return f"rgb({rg},{rg},255)"


def render_sentence(tokens, intensities, labels=None, sentence_score=None) -> str:
    spans = []
    for i, (tok, x) in enumerate(zip(tokens, intensities)):
        fg = "#fff" if x > 0.6 else "#000"
        deco = ";text-decoration:underline" if labels is not None and labels[i] else ""
        spans.append(
            f'<span class="t" style="background:{token_color(x)};color:{fg}{deco}" '
            f'title="{x:.4f}">{html.escape(tok)}</span>'
        )
    meta = "" if sentence_score is None else f'<span class="meta">y={sentence_score:.3f}</span>'
    return f'<div class="s">{meta}{" ".join(spans)}</div>'


def render_html(sentences, scores, method: str = "attention", gold=None,
                sentence_scores=None, title: str = "Token scores") -> str:
    """Self-contained page; attention scores are used as-is, other methods'
    scores are min-max normalized per sentence."""
    rows = []
    for k, (tokens, s) in enumerate(zip(sentences, scores)):
        inten = np.clip(np.asarray(s, dtype=np.float64), 0, 1) if method == "attention" else minmax(s)
        rows.append(render_sentence(
            tokens, inten,
            None if gold is None else gold[k],
            None if sentence_scores is None else sentence_scores[k],
        ))
    return _PAGE.format(title=html.escape(f"{title} ({method})"), body="\n".join(rows))
