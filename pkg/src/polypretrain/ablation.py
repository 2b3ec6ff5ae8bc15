"""Ablation harness: pretraining task toggles and star-handling strategies.

Every variant is pretrained on the same corpus and then scored by k-fold
fine-tuning on the same property dataset, so rows differ only in the
ablated setting. The all-off row skips pretraining entirely.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from typing import Sequence

from .finetune import EvalReport, FinetuneConfig, PropertyDataset, run_cross_validation
from .pretrain import PretrainConfig, TaskToggles, init_model, run_pretraining
from .psmiles import StarStrategy, build_vocabulary
from .seq_encoder import SeqConfig
from .struct_encoder import StructConfig

log = logging.getLogger(__name__)

STRATEGY_LABELS = {
    StarStrategy.KEEP: "Keep",
    StarStrategy.REMOVE: "Remove",
    StarStrategy.SUBSTITUTE: "Star Substitution",
}


@dataclass
class AblationRow:
    table: str  # "tasks" or "strategy"
    label: str
    mlm: bool
    denoise: bool
    contrast: bool
    strategy: str
    rmse_mean: float
    rmse_std: float
    r2_mean: float
    r2_std: float
    seconds: float

    @classmethod
    def from_report(cls, table, label, toggles: TaskToggles, strategy, rep: EvalReport, seconds) -> AblationRow:
        (em, es), (rm, rs) = rep.rmse, rep.r2
        return cls(table, label, toggles.mlm, toggles.denoise, toggles.contrast, strategy, em, es, rm, rs, seconds)


@dataclass
class AblationReport:
    rows: list[AblationRow]
    dataset: str

    def to_json(self) -> str:
        return json.dumps({"dataset": self.dataset, "rows": [asdict(r) for r in self.rows]}, indent=2) + "\n"

    def to_text(self) -> str:
        def mark(on):
            return "yes" if on else "no"

        out = [f"Pretraining tasks ({self.dataset}, mean +- std over folds)"]
        out.append(f"{'1D pre':>8} {'3D pre':>8} {'Contrastive':>12} {'RMSE':>18} {'R2':>18}")
        for r in (r for r in self.rows if r.table == "tasks"):
            out.append(
                f"{mark(r.mlm):>8} {mark(r.denoise):>8} {mark(r.contrast):>12} "
                f"{r.rmse_mean:>9.4f} +- {r.rmse_std:<6.4f} {r.r2_mean:>9.4f} +- {r.r2_std:<6.4f}"
            )
        out.append("")
        out.append("Star handling for 3D conformers")
        out.append(f"{'Strategy':<18} {'RMSE':>18} {'R2':>18}")
        for r in (r for r in self.rows if r.table == "strategy"):
            out.append(f"{r.label:<18} {r.rmse_mean:>9.4f} +- {r.rmse_std:<6.4f} {r.r2_mean:>9.4f} +- {r.r2_std:<6.4f}")
        return "\n".join(out) + "\n"


def run_ablation(
    corpus: Sequence[str],
    dataset: PropertyDataset,
    pre_cfg: PretrainConfig,
    ft_cfg: FinetuneConfig,
    seq_cfg: SeqConfig | None = None,
    struct_cfg: StructConfig | None = None,
) -> AblationReport:
    """All eight task combinations with Star Substitution, then the three strategies with every task on.

    The full-task Star Substitution run is shared between the two tables.
    """
    vocab = build_vocabulary(list(corpus) + dataset.psmiles)
    seq_cfg = seq_cfg or SeqConfig(vocab_size=len(vocab))
    struct_cfg = struct_cfg or StructConfig()
    cache: dict[tuple[TaskToggles, str], tuple[EvalReport, float]] = {}

    def score(toggles: TaskToggles, strategy: StarStrategy) -> tuple[EvalReport, float]:
        key = (toggles, strategy.value)
        if key not in cache:
            t0 = time.perf_counter()
            pcfg = replace(pre_cfg, strategy=strategy.value)
            log.info("ablation: tasks=%s strategy=%s", toggles.label(), strategy.value)
            if toggles.any:
                params = run_pretraining(corpus, pcfg, toggles, seq_cfg, struct_cfg, vocab=vocab, log_every=0).params
            else:
                params = init_model(seq_cfg, struct_cfg, pcfg.contrast_dim, pcfg.seed)
            rep = run_cross_validation(dataset, params, vocab, seq_cfg, struct_cfg, replace(ft_cfg, strategy=strategy.value))
            cache[key] = (rep, time.perf_counter() - t0)
        return cache[key]

    rows = []
    for tg in TaskToggles.all_combinations():
        rep, sec = score(tg, StarStrategy.SUBSTITUTE)
        rows.append(AblationRow.from_report("tasks", tg.label(), tg, StarStrategy.SUBSTITUTE.value, rep, sec))
    full = TaskToggles()
    for st in (StarStrategy.KEEP, StarStrategy.REMOVE, StarStrategy.SUBSTITUTE):
        rep, sec = score(full, st)
        rows.append(AblationRow.from_report("strategy", STRATEGY_LABELS[st], full, st.value, rep, sec))
    return AblationReport(rows, dataset.name)
