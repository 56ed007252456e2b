"""Substitution-corruption trials for the toy translator."""

from __future__ import annotations

import numpy as np

from crossedit.align import alignment_score


def corrupt(tokens: list[str], s: int, pool: list[str], rng: np.random.Generator) -> list[str]:
    out = list(tokens)
    for pos in rng.choice(len(tokens), size=s, replace=False):
        choices = [w for w in pool if w != tokens[pos]]
        out[pos] = choices[int(rng.integers(len(choices)))]
    return out


def level_means(translator, gold: str, tgt: str, pool: list[str], trials: int, levels: int, seed: int) -> list[float]:
    """Mean alignment score of ``gold`` corrupted with s = 0..levels-1 substitutions."""
    rng = np.random.default_rng(seed)
    toks = gold.split()
    means = []
    for s in range(levels):
        vals = [alignment_score(translator, " ".join(corrupt(toks, s, pool, rng)), gold, tgt).value for _ in range(trials)]
        means.append(float(np.mean(vals)))
    return means


def toy_golds(world, n: int, seed: int) -> list[str]:
    """Target-language answer sentences long enough for four substitutions."""
    golds = []
    for case in world.eval_cases(n, seed):
        zh = case.edit["zh"]
        golds.append(f"{zh.prompt[:-2]} {zh.target_new} {case.portability_probes['zh'][0].answer}")
    return golds
