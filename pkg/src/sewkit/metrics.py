"""Evaluation metrics over predicted vs ground-truth patterns.

Class slots fix the panel correspondence, so no assignment step is needed:
a predicted panel matches the ground-truth panel of the same class.
Distances are unsquared L2; stitch sets compare as unordered endpoint
pairs. Reported F1 is the harmonic mean of the reported (macro-averaged)
precision and recall.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pattern import SewingPattern


class LengthMismatch(Exception):
    pass


@dataclass
class MetricsReport:
    panel_l2: float
    rot_l2: float
    trans_l2: float
    num_panel_acc: float
    num_edges_acc: float
    stitch_precision: float
    stitch_recall: float
    stitch_f1: float
    n_patterns: int

    def to_dict(self, config: dict | None = None) -> dict:
        out = {
            "panel_l2": self.panel_l2,
            "rot_l2": self.rot_l2,
            "trans_l2": self.trans_l2,
            "num_panel_acc": self.num_panel_acc,
            "num_edges_acc": self.num_edges_acc,
            "stitch_precision": self.stitch_precision,
            "stitch_recall": self.stitch_recall,
            "stitch_f1": self.stitch_f1,
            "n_patterns": self.n_patterns,
        }
        if config is not None:
            out["config"] = config
        return out


def stitch_prf(pred: set | list, gt: set | list) -> tuple[float, float, float]:
    """Set precision/recall/F1 over canonical stitch endpoint pairs.

    Empty prediction scores precision 1 by the 0/0 -> 1 convention, so an
    empty-vs-empty comparison is perfect and empty-vs-nonempty is (1, 0, 0).
    """
    pred_set = {tuple(s.endpoints()) if hasattr(s, "endpoints") else tuple(s) for s in pred}
    gt_set = {tuple(s.endpoints()) if hasattr(s, "endpoints") else tuple(s) for s in gt}
    tp = len(pred_set & gt_set)
    precision = tp / len(pred_set) if pred_set else 1.0
    recall = tp / len(gt_set) if gt_set else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _panel_vec(panel, e_max: int) -> np.ndarray:
    out = np.zeros((e_max, 4))
    for j, e in enumerate(panel.edges):
        out[j] = e.params()
    return out.reshape(-1)


def evaluate(preds: list[SewingPattern], gts: list[SewingPattern]) -> MetricsReport:
    """Index-aligned pairwise evaluation, averaged over pattern pairs.

    panel_l2 averages over ground-truth panels; a missing predicted panel
    contributes the norm of the ground-truth vector. Rotation and
    translation errors average over panels present in both patterns, as
    does the edge-count accuracy.
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")

    panel_l2s, rot_l2s, trans_l2s = [], [], []
    panel_accs, edge_accs, precs, recs = [], [], [], []
    for pred, gt in zip(preds, gts):
        pred_by_class = {p.class_id: p for p in pred.panels}
        gt_by_class = {p.class_id: p for p in gt.panels}

        dists = []
        rot_errs, trans_errs, edge_hits = [], [], []
        for k, gpanel in gt_by_class.items():
            ppanel = pred_by_class.get(k)
            e_max = max(
                len(gpanel.edges), len(ppanel.edges) if ppanel else 0
            )
            gvec = _panel_vec(gpanel, e_max)
            if ppanel is None:
                dists.append(float(np.linalg.norm(gvec)))
                continue
            pvec = _panel_vec(ppanel, e_max)
            dists.append(float(np.linalg.norm(pvec - gvec)))
            q = np.asarray(ppanel.rotation)
            qh = np.asarray(gpanel.rotation)
            rot_errs.append(min(np.linalg.norm(q - qh), np.linalg.norm(q + qh)))
            trans_errs.append(
                np.linalg.norm(np.asarray(ppanel.translation) - np.asarray(gpanel.translation))
            )
            edge_hits.append(float(len(ppanel.edges) == len(gpanel.edges)))

        panel_l2s.append(float(np.mean(dists)) if dists else 0.0)
        rot_l2s.append(float(np.mean(rot_errs)) if rot_errs else 0.0)
        trans_l2s.append(float(np.mean(trans_errs)) if trans_errs else 0.0)
        panel_accs.append(float(set(pred_by_class) == set(gt_by_class)))
        edge_accs.append(float(np.mean(edge_hits)) if edge_hits else 0.0)
        p, r, _ = stitch_prf(pred.stitches, gt.stitches)
        precs.append(p)
        recs.append(r)

    precision = float(np.mean(precs)) if precs else 1.0
    recall = float(np.mean(recs)) if recs else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(
        panel_l2=float(np.mean(panel_l2s)) if panel_l2s else 0.0,
        rot_l2=float(np.mean(rot_l2s)) if rot_l2s else 0.0,
        trans_l2=float(np.mean(trans_l2s)) if trans_l2s else 0.0,
        num_panel_acc=float(np.mean(panel_accs)) if panel_accs else 0.0,
        num_edges_acc=float(np.mean(edge_accs)) if edge_accs else 0.0,
        stitch_precision=precision,
        stitch_recall=recall,
        stitch_f1=f1,
        n_patterns=len(preds),
    )
