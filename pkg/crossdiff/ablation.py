"""
Ablation grids.

Each grid cell trains a fresh model per seed on synthetic training scenes and
evaluates it on held-out scenes with extra same-class distractors. Cell
metrics are seed means of the overall subset.
"""

import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .scenes import SceneConfig, generate_corpus
from .trainer import evaluate, train

logger = logging.getLogger(__name__)

Variant = Tuple[str, Dict[str, Any]]
METRICS = ("rec_acc@0.25", "rec_acc@0.50", "res_acc@0.25", "res_acc@0.50", "miou")


def grid_variants(config) -> List[Variant]:
    """Named config overrides for the grid selected by ``ablate.grid``."""
    grid = config.get("ablate.grid")
    if grid == "components":
        variants = []
        for plda in (True, False):
            for clda in (True, False):
                for dgtl in (True, False):
                    off = [name for name, on in (("plda", plda), ("clda", clda), ("dgtl", dgtl)) if not on]
                    name = "full" if not off else "no-" + "-".join(n.upper() for n in off)
                    variants.append((name, {"plda.enabled": plda, "clda.enabled": clda,
                                            "loss.dgtl_enabled": dgtl}))
        return variants
    if grid == "clusters":
        n_points = config.get("scenes.n_points")
        k_graph = config.get("clda.k_graph")
        return [(f"n_clust={n}", {"clda.n_clust": n, "clda.k_graph": min(k_graph, n - 1)})
                for n in config.get("ablate.n_clust_values") if n >= 2 and n_points % n == 0]
    if grid == "routing":
        return [(f"max<-{src}", {"plda.max_block_source": src}) for src in ("fv4", "kt2v", "ft", "kv2t")]
    if grid == "attention":
        return [(kind, {"attention.kind": kind}) for kind in ("diff", "standard")]
    raise ValueError(f"Unknown ablation grid '{grid}'")


def _held_out(config, seed: int):
    cfg = SceneConfig.from_config(config)
    cfg.n_distractors = max(config.get("eval.n_distractors"), cfg.n_distractors)
    cfg.n_objects = max(cfg.n_objects, cfg.n_distractors + 1)
    corpus = generate_corpus(seed + config.get("eval.seed_offset"), config.get("eval.n_scenes"), cfg,
                             config.get("scenes.expressions_per_scene"), config.template_weights(), split="val")
    return corpus.samples()


def _train_samples(config, seed: int):
    corpus = generate_corpus(seed, config.get("train.n_scenes"), SceneConfig.from_config(config),
                             config.get("scenes.expressions_per_scene"), config.template_weights())
    return corpus.samples()


def _mean_metrics(reports: List[Optional[Dict[str, float]]]) -> Optional[Dict[str, float]]:
    present = [r for r in reports if r is not None]
    if not present:
        return None
    out = {m: float(np.mean([r[m] for r in present])) for m in METRICS}
    out["count"] = int(sum(r["count"] for r in present))
    return out


def _orderings(variants: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    by_name = {v["name"]: v["overall"] for v in variants}
    checks = []
    for other in ("no-CLDA", "no-PLDA"):
        if "full" in by_name and other in by_name and by_name["full"] and by_name[other]:
            full, ablated = by_name["full"]["rec_acc@0.25"], by_name[other]["rec_acc@0.25"]
            checks.append({"description": f"full ({full:.3f}) >= {other} ({ablated:.3f}) on rec_acc@0.25",
                           "holds": full >= ablated})
    return checks


def run_ablation(config, run=None) -> Dict[str, Any]:
    """
    Train and evaluate every cell of the selected grid over ``ablate.seeds`` seeds.

    Args:
        config: Base RunConfig; each cell applies its overrides on top.
        run: Optional RunDirectory receiving one metrics line per cell and seed.

    Returns:
        Report dict of kind ``ablation`` with per-variant mean metrics
        (overall and per subset) and the full-vs-ablated ordering checks.
    """
    base_seed = config.get("seed")
    n_seeds = config.get("ablate.seeds")
    steps = config.get("ablate.steps")
    variants = []
    for name, overrides in grid_variants(config):
        per_seed = []
        for s in range(n_seeds):
            cfg = config.with_values({**overrides, "seed": base_seed + s, "train.steps": steps})
            cfg.validate()
            model, _ = train(cfg, _train_samples(cfg, base_seed + s))
            report = evaluate(model, _held_out(cfg, base_seed + s))
            per_seed.append(report["subsets"])
            if run:
                run.log_metrics({"variant": name, "seed": base_seed + s, "subsets": report["subsets"]})
            logger.info("%s seed %d: rec_acc@0.25=%.3f", name, base_seed + s,
                        (report["subsets"]["overall"] or {}).get("rec_acc@0.25", 0.0))
        subsets = {tag: _mean_metrics([r[tag] for r in per_seed]) for tag in per_seed[0]} if per_seed else {}
        variants.append({"name": name, "overrides": overrides, "overall": subsets.get("overall"),
                         "subsets": subsets})
    return {"kind": "ablation", "grid": config.get("ablate.grid"), "seeds": n_seeds, "steps": steps,
            "variants": variants, "orderings": _orderings(variants)}
