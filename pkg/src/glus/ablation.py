"""The six-row ablation, the memory-stride sweep and the selector comparison.

Every training run lives under ``<out>/runs/<row>/seed<k>/``.  A run whose
settings file matches the current configuration and whose final checkpoint
exists is loaded instead of retrained, so an interrupted sweep resumes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .dataset import Dataset, generate_world
from .metrics import MetricReport, evaluate_predictions, frame_iou
from .model import Segmenter
from .report import bar_figure, curve_text, emit_curve, format_table, read_curve, write_table
from .selector import (
    annotate_pseudo_labels,
    load_selector,
    propagate_from_keys,
    save_selector,
    train_selector,
    write_labels,
)
from .trainer import InferOptions, TrainConfig, binarize, infer_masks, load_checkpoint, predict, train

log = logging.getLogger(__name__)

ROWS: list[tuple[str, str, dict]] = [
    ("Global", "global", dict(global_only=True, use_memory=False, use_contrastive=False)),
    ("Local", "local", dict(local_only=True, use_memory=False, use_contrastive=False)),
    ("+ GLU", "glu", dict(use_memory=False, use_contrastive=False)),
    ("+ GLU + MB", "glu_mb", dict(use_memory=True, use_contrastive=False)),
    ("+ GLU + MB + OC", "glu_mb_oc", dict(use_memory=True, use_contrastive=True)),
]
KFS_ROW = "+ GLU + MB + OC + KFS"
CURVE_ROW = "glu_mb_oc"
TABLE_COLUMNS = ["row", "J", "F", "J&F", "J&F_sd", "seeds"]


def split_world(world: Dataset, valid_fraction: float) -> tuple[Dataset, Dataset]:
    """Hold out the last ``valid_fraction`` of videos (generation is i.i.d. per video)."""
    n_valid = int(round(valid_fraction * len(world.videos)))
    if not 0 < n_valid < len(world.videos):
        raise ValueError(f"valid_fraction {valid_fraction} leaves an empty split")
    ids = [v.video_id for v in world.videos]
    return world.subset(ids[:-n_valid]), world.subset(ids[-n_valid:])


def _mean_report(reports: list[MetricReport]) -> dict:
    jf = [r.JF for r in reports]
    return {
        "J": float(np.mean([r.J for r in reports])),
        "F": float(np.mean([r.F for r in reports])),
        "J&F": float(np.mean(jf)),
        "J&F_sd": float(np.std(jf)),
        "seeds": len(reports),
    }


@dataclass
class Run:
    model: Segmenter
    train_cfg: TrainConfig
    run_dir: Path


@dataclass
class AblationResult:
    rows: dict[str, list[MetricReport]] = field(default_factory=dict)
    strides: dict[int, list[MetricReport]] = field(default_factory=dict)
    random_key: list[MetricReport] = field(default_factory=list)
    label_error: float = 0.0
    curve: list[tuple[int, float]] = field(default_factory=list)

    def table(self) -> list[dict]:
        return [{"row": name, **_mean_report(reps)} for name, reps in self.rows.items()]

    def mean(self, row: str) -> float:
        return float(np.mean([r.JF for r in self.rows[row]]))


class Ablation:
    def __init__(self, cfg: C.Config, out_dir: str | Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.world = generate_world(C.world_config(cfg))
        self.train_ds, self.valid_ds = split_world(self.world, cfg["ablate.valid_fraction"])
        self.options = C.infer_options(cfg)
        self.weights = C.loss_weights(cfg)
        self.result = AblationResult()

    # -- runs ---------------------------------------------------------------

    def _settings(self, flags: dict, seed: int) -> str:
        keys = [k for k in C.KEYS if k.split(".")[0] in ("world", "model", "loss", "memory", "train", "data")]
        lines = [f"{k} = {C.format_value(self.cfg[k])}" for k in keys]
        lines += [f"flag.{k} = {v}" for k, v in sorted(flags.items())] + [f"seed = {seed}"]
        return "\n".join(lines) + "\n"

    def run(self, slug: str, flags: dict, seed: int) -> Run:
        cfg = self.cfg
        tc = C.train_config(cfg, seed=seed, **flags)
        if slug == CURVE_ROW and cfg["ablate.curve_snapshots"] > 0:
            tc = replace(tc, checkpoint_every=max(1, tc.steps // cfg["ablate.curve_snapshots"]))
        run_dir = self.out / "runs" / slug / f"seed{seed}"
        settings = self._settings(flags, seed)
        final = run_dir / f"step_{tc.steps}" / "checkpoint.pt"
        stamp = run_dir / "settings.txt"
        if final.is_file() and stamp.is_file() and stamp.read_text() == settings:
            log.info("reusing %s", run_dir)
            model, _ = load_checkpoint(final)
            return Run(model, tc, run_dir)
        log.info("training %s seed %d (%d steps)", slug, seed, tc.steps)
        stamp.unlink(missing_ok=True)
        torch.manual_seed(seed)
        model = Segmenter(C.model_config(cfg))
        train(self.train_ds, model, tc, self.weights, run_dir, log_every=max(1, tc.steps // 10))
        stamp.write_text(settings)
        return Run(model, tc, run_dir)

    def evaluate(self, run: Run, options: InferOptions | None = None, selector=None) -> MetricReport:
        preds = infer_masks(run.model, self.valid_ds, run.train_cfg, options or self.options, selector)
        return evaluate_predictions(preds, self.valid_ds)

    # -- pieces -------------------------------------------------------------

    def rows(self) -> dict[str, dict[int, Run]]:
        runs: dict[str, dict[int, Run]] = {}
        for name, slug, flags in ROWS:
            runs[slug] = {}
            self.result.rows[name] = []
            for seed in self.cfg["ablate.seeds"]:
                run = self.run(slug, flags, seed)
                runs[slug][seed] = run
                rep = self.evaluate(run)
                self.result.rows[name].append(rep)
                (run.run_dir / "metrics.json").write_text(json.dumps(rep.row(), indent=1))
                log.info("%s seed %d: %s", name, seed, {k: round(v, 4) for k, v in rep.row().items()})
        return runs

    def strides(self, runs: dict[int, Run]) -> None:
        for stride in self.cfg["ablate.strides"]:
            opts = replace(self.options, stride=stride, use_memory=True)
            self.result.strides[stride] = [self.evaluate(r, opts) for r in runs.values()]
            log.info("stride %d: J&F %.4f", stride, np.mean([r.JF for r in self.result.strides[stride]]))

    def key_frames(self, runs: dict[int, Run]) -> None:
        cfg = self.cfg
        kfs, rand = [], []
        errors = []
        for seed, run in runs.items():
            early_step = max(1, round(run.train_cfg.steps * run.train_cfg.early_stop_fraction))
            early, early_cfg = load_checkpoint(run.run_dir / f"step_{early_step}")
            sel_dir = run.run_dir / "selector"
            labels = annotate_pseudo_labels(early, self.train_ds, cfg["selector.fraction"], early_cfg, self.options, seed)
            write_labels(labels, run.run_dir / "pseudo_labels.jsonl")
            errors.append(self._label_error(early, early_cfg, labels))
            sel_settings = C.dump(cfg) + f"seed = {seed}\n"
            stamp = sel_dir / "settings.txt"
            if (sel_dir / "selector.pt").is_file() and stamp.is_file() and stamp.read_text() == sel_settings:
                sel = load_selector(sel_dir)
            else:
                sel, _ = train_selector(self.train_ds, labels, C.selector_config(cfg, seed=seed), log_every=0)
                save_selector(sel_dir, sel)
                stamp.write_text(sel_settings)
            kfs.append(self.evaluate(run, selector=sel))
            rng = np.random.default_rng(seed)
            keys = [int(rng.integers(self.valid_ds.video(s.video_id).num_frames)) for s in self.valid_ds.samples]
            logits = propagate_from_keys(run.model, self.valid_ds, self.valid_ds.samples, keys, run.train_cfg, self.options)
            rand.append(evaluate_predictions({k: binarize(v) for k, v in logits.items()}, self.valid_ds))
            log.info("seed %d: KFS %.4f random key %.4f", seed, kfs[-1].JF, rand[-1].JF)
        self.result.rows[KFS_ROW] = kfs
        self.result.random_key = rand
        self.result.label_error = max(errors)

    def _label_error(self, model, train_cfg, labels) -> float:
        """Largest gap between stored labels and a fresh evaluation of the same masks."""
        vids = {l.video_id for l in labels}
        subset = self.train_ds.subset(vids)
        preds = predict(model, subset, train_cfg, self.options)
        worst = 0.0
        for l in labels:
            gt = subset.video(l.video_id).objects[_target(subset, l.sample_id)]
            iou = frame_iou(preds[l.sample_id][l.frame].astype(bool), gt[l.frame].astype(bool))
            worst = max(worst, abs(iou - l.iou))
        return worst

    def curve(self, run: Run) -> None:
        points = []
        for ckpt in sorted(run.run_dir.glob("step_*/checkpoint.pt"), key=lambda p: int(p.parent.name[5:])):
            model, tc = load_checkpoint(ckpt)
            rep = evaluate_predictions(predict(model, self.valid_ds, tc, self.options), self.valid_ds)
            points.append((int(ckpt.parent.name[5:]), rep.JF))
        self.result.curve = points

    # -- everything -----------------------------------------------------------

    def run_all(self, with_selector: bool = True) -> AblationResult:
        runs = self.rows()
        self.strides(runs["glu_mb"])
        if with_selector:
            self.key_frames(runs["glu_mb_oc"])
        first_seed = next(iter(runs[CURVE_ROW]))
        if self.cfg["ablate.curve_snapshots"] > 0:
            self.curve(runs[CURVE_ROW][first_seed])
        self.write()
        return self.result

    def write(self) -> None:
        res, out = self.result, self.out
        table = res.table()
        write_table(table, TABLE_COLUMNS, out / "ablation.tsv")
        bar_figure([r["row"] for r in table], [r["J&F"] for r in table], out / "ablation.png", errors=[r["J&F_sd"] for r in table])
        seed_rows = [
            {"row": name, "seed": seed, **rep.row()}
            for name, reps in res.rows.items()
            for seed, rep in zip(self.cfg["ablate.seeds"], reps)
        ]
        write_table(seed_rows, ["row", "seed", "J", "F", "J&F"], out / "ablation_seeds.tsv")
        if res.strides:
            rows = [{"stride": str(s), **_mean_report(reps)} for s, reps in res.strides.items()]
            if "+ GLU" in res.rows:
                rows.append({"stride": "no-memory", **_mean_report(res.rows["+ GLU"])})
            write_table(rows, ["stride", "J", "F", "J&F", "J&F_sd", "seeds"], out / "strides.tsv")
            bar_figure([r["stride"] for r in rows], [r["J&F"] for r in rows], out / "strides.png")
        if res.random_key:
            rows = [
                {"selection": "none", **_mean_report(res.rows["+ GLU + MB + OC"])},
                {"selection": "random", **_mean_report(res.random_key)},
                {"selection": "selector", **_mean_report(res.rows[KFS_ROW])},
            ]
            write_table(rows, ["selection", "J", "F", "J&F", "J&F_sd", "seeds"], out / "selector.tsv")
        text = [format_table(table, TABLE_COLUMNS)]
        if len(res.curve) >= 2:
            emit_curve(res.curve, out / "curve.csv")
            text += ["training curve (step, J&F):", curve_text(read_curve(out / "curve.csv"))]
        (out / "report.txt").write_text("\n".join(text))
        summary = {
            "rows": {k: [r.row() for r in v] for k, v in res.rows.items()},
            "strides": {str(k): [r.row() for r in v] for k, v in res.strides.items()},
            "random_key": [r.row() for r in res.random_key],
            "label_error": res.label_error,
            "curve": res.curve,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=1))


def _target(ds: Dataset, sample_id: str) -> str:
    for s in ds.samples:
        if s.sample_id == sample_id:
            return s.target_object_id
    raise KeyError(sample_id)


def run_ablation(cfg: C.Config, out_dir: str | Path, with_selector: bool = True) -> AblationResult:
    return Ablation(cfg, out_dir).run_all(with_selector)
