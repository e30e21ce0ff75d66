"""View filtering: entropy confidence selection, cosine fidelity filtration,
their combination, and the masked marginal class distribution."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np

from .augmentation import ViewBatch, ViewSource
from .errors import EmptyInput, EmptySelection, LengthMismatch
from .numerics import Direction, fraction_threshold, shannon_entropy


@dataclass(frozen=True)
class SelectionMask:
    keep: np.ndarray

    def __post_init__(self):
        keep = np.asarray(self.keep, dtype=bool).copy()
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)

    @property
    def selected_count(self) -> int:
        return int(self.keep.sum())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    def __len__(self):
        return self.keep.size

    @classmethod
    def all(cls, n: int) -> "SelectionMask":
        return cls(np.ones(n, dtype=bool))


class Removal(enum.Enum):
    KEPT = "KEPT"
    ENTROPY = "ENTROPY"
    COSINE = "COSINE"
    BOTH = "BOTH"


def _subset_threshold(values, fraction, direction, subset) -> np.ndarray:
    """Apply a fraction threshold inside ``subset`` only; outside entries pass."""
    keep = np.ones(values.shape[0], dtype=bool)
    idx = np.flatnonzero(subset)
    if idx.size:
        keep[idx] = fraction_threshold(values[idx], fraction, direction)
    return keep


def entropy_confidence_mask(view_probs, rho_H: float, subset=None) -> SelectionMask:
    """Keep the ceil(rho_H * N) views with the lowest prediction entropy.

    With ``subset`` given, only those views compete; the rest pass through.
    """
    probs = np.asarray(view_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EmptyInput("need at least one view")
    ent = shannon_entropy(probs)
    if subset is None:
        return SelectionMask(fraction_threshold(ent, rho_H, Direction.KEEP_LOWEST))
    return SelectionMask(_subset_threshold(ent, rho_H, Direction.KEEP_LOWEST, np.asarray(subset, bool)))


def cosines_to_original(views) -> np.ndarray:
    E = views.embeddings if isinstance(views, ViewBatch) else np.asarray(views, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise EmptyInput("need at least one view")
    cos = np.clip(E @ E[0], -1.0, 1.0)
    # the original view is compared with itself
    cos[0] = 1.0
    return cos


def cosine_fidelity_mask(views, rho_C: float, subset=None) -> SelectionMask:
    """Keep the ceil(rho_C * N) views most similar to the original (index 0).

    The original is always kept, even when ties at cosine 1 would otherwise
    crowd it out.
    """
    cos = cosines_to_original(views)
    if subset is None:
        keep = fraction_threshold(cos, rho_C, Direction.KEEP_HIGHEST)
    else:
        keep = _subset_threshold(cos, rho_C, Direction.KEEP_HIGHEST, np.asarray(subset, bool))
    keep[0] = True
    return SelectionMask(keep)


def combine_masks(entropy_mask: SelectionMask, cosine_mask: SelectionMask) -> SelectionMask:
    if len(entropy_mask) != len(cosine_mask):
        raise LengthMismatch(f"mask lengths differ: {len(entropy_mask)} vs {len(cosine_mask)}")
    keep = entropy_mask.keep & cosine_mask.keep
    if not keep.any():
        keep = keep.copy()
        keep[0] = True
    return SelectionMask(keep)


def marginal_probability(view_probs, mask: SelectionMask) -> np.ndarray:
    """Average of the selected views' class distributions."""
    probs = np.asarray(view_probs, dtype=np.float64)
    if probs.shape[0] != len(mask):
        raise LengthMismatch("mask and view count differ")
    if mask.selected_count < 1:
        raise EmptySelection("no view selected")
    p = probs[mask.keep].mean(axis=0)
    return p / p.sum()


def select_views(view_probs, views: ViewBatch, rho_H: float, rho_C: float,
                 per_family: bool = False, use_cosine: bool = True):
    """Both filters plus their combination: returns (entropy, cosine, combined) masks.

    ``per_family`` restricts entropy selection to standard views and cosine
    filtration to diffusion views (the original competes in both).
    """
    n = len(views)
    if per_family:
        ent_subset = views.sources != ViewSource.DIFFUSION
        cos_subset = views.sources != ViewSource.STANDARD
    else:
        ent_subset = cos_subset = None
    ent = entropy_confidence_mask(view_probs, rho_H, ent_subset)
    cos = cosine_fidelity_mask(views, rho_C, cos_subset) if use_cosine else SelectionMask.all(n)
    return ent, cos, combine_masks(ent, cos)


@dataclass
class SelectionDiagnostics:
    entropy: np.ndarray
    cosine: np.ndarray
    removal: list
    sources: np.ndarray
    spurious_flags: np.ndarray
    cosine_keep: np.ndarray

    @classmethod
    def build(cls, view_probs, views: ViewBatch, entropy_mask, cosine_mask, combined):
        removal = []
        for e_keep, c_keep, kept in zip(entropy_mask.keep, cosine_mask.keep, combined.keep):
            if kept:
                removal.append(Removal.KEPT)
            elif not e_keep and not c_keep:
                removal.append(Removal.BOTH)
            elif not e_keep:
                removal.append(Removal.ENTROPY)
            else:
                removal.append(Removal.COSINE)
        return cls(
            entropy=np.asarray(shannon_entropy(view_probs)),
            cosine=cosines_to_original(views),
            removal=removal,
            sources=views.sources.copy(),
            spurious_flags=views.spurious_flags.copy(),
            cosine_keep=cosine_mask.keep.copy(),
        )

    def counts(self) -> dict:
        return {r.value: sum(1 for x in self.removal if x is r) for r in Removal}

    @property
    def n_spurious(self) -> int:
        return int(self.spurious_flags.sum())

    @property
    def spurious_recall(self) -> float:
        """Fraction of spurious views removed by the combined selection (nan if none)."""
        if self.n_spurious == 0:
            return float("nan")
        removed = np.array([r is not Removal.KEPT for r in self.removal])
        return float(removed[self.spurious_flags].mean())

    @property
    def cosine_spurious_recall(self) -> float:
        if self.n_spurious == 0:
            return float("nan")
        return float((~self.cosine_keep[self.spurious_flags]).mean())

    def csv_rows(self, sample_id):
        for i, r in enumerate(self.removal):
            yield {
                "sample_id": sample_id,
                "view_index": i,
                "source": ViewSource(int(self.sources[i])).name,
                "entropy": repr(float(self.entropy[i])),
                "cosine": repr(float(self.cosine[i])),
                "removal_category": r.value,
                "spurious_flag": int(bool(self.spurious_flags[i])),
            }


DIAGNOSTIC_FIELDS = ["sample_id", "view_index", "source", "entropy", "cosine",
                     "removal_category", "spurious_flag"]


def diagnostics_to_csv(items, fh=None) -> str | None:
    """Write ``(sample_id, SelectionDiagnostics)`` pairs as per-view CSV rows."""
    out = fh if fh is not None else io.StringIO()
    writer = csv.DictWriter(out, fieldnames=DIAGNOSTIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for sample_id, diag in items:
        writer.writerows(diag.csv_rows(sample_id))
    if fh is None:
        return out.getvalue()
    return None
