"""Vocabulary transplant from a donor bundle into a base bundle."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .geometry import (
    CompositeDictionary,
    SharedAlignment,
    align_shared,
    build_composites,
    token_vector,
)
from .omp import SparseDesign, omp_decompose, reuse_reconstruct
from .operators import (
    DEFAULT_CLP_EPS,
    DEFAULT_KNN,
    DEFAULT_TEMPERATURE,
    ClpOperator,
    FocusOperator,
    WechselOperator,
    procrustes_fit,
)
from .tensorio import ModelBundle

OPERATORS = ("omp", "focus", "clp", "wechsel")
DEFAULT_K = 64


@dataclass
class TransplantParams:
    k: int = DEFAULT_K
    w_e: float = 1.0
    w_h: float = 1.0
    per_view_norm: bool = True
    temperature: float = DEFAULT_TEMPERATURE
    epsilon: float = DEFAULT_CLP_EPS
    knn_k: int = DEFAULT_KNN

    def to_dict(self) -> dict:
        return asdict(self)


class Transplanter:
    """Shared dictionaries and an operator for one (base, donor) pair.

    Construction aligns the vocabularies and builds both composite
    dictionaries once; :meth:`synthesize` then maps any donor-space vector
    to a base-space row.
    """

    def __init__(self, base: ModelBundle, donor: ModelBundle, op: str = "omp",
                 params: TransplantParams | None = None):
        if op not in OPERATORS:
            raise ConfigError(f"unknown operator {op!r}; choose from {OPERATORS}")
        self.base = base
        self.donor = donor
        self.op = op
        self.params = params or TransplantParams()
        p = self.params
        self.alignment: SharedAlignment = align_shared(base.vocab, donor.vocab)
        self.dict_b: CompositeDictionary = build_composites(
            base, self.alignment.base_ids, p.w_e, p.w_h, p.per_view_norm)
        self.dict_d: CompositeDictionary = build_composites(
            donor, self.alignment.donor_ids, p.w_e, p.w_h, p.per_view_norm)
        if op == "focus":
            self.operator = FocusOperator(self.dict_d, self.dict_b, p.temperature)
        elif op == "clp":
            self.operator = ClpOperator(self.dict_d, self.dict_b, p.epsilon)
        elif op == "wechsel":
            pmap = procrustes_fit(self.dict_d.rows, self.dict_b.rows)
            self.operator = WechselOperator(pmap, self.dict_b, p.knn_k, p.temperature)
        else:
            self.operator = None

    def query(self, donor: ModelBundle, token_id: int) -> np.ndarray:
        return token_vector(donor, token_id, self.params.w_e, self.params.w_h)

    def synthesize(self, x: np.ndarray) -> tuple[np.ndarray, SparseDesign | None]:
        if self.op == "omp":
            design = omp_decompose(self.dict_d, x, self.params.k)
            return reuse_reconstruct(self.dict_b, design), design
        return self.operator(x), None

    def exclusive_ids(self, donor: ModelBundle | None = None) -> list[int]:
        donor = donor or self.donor
        return [i for i, t in enumerate(donor.vocab) if t not in self.base.vocab]

    def transplant(self, donor: ModelBundle | None = None, onto: ModelBundle | None = None,
                   ids: list[int] | None = None) -> ModelBundle:
        """Append synthesized rows for donor-exclusive tokens.

        ``donor`` defaults to the construction donor; passing a patched
        donor reuses the already-built dictionaries, which is valid as long
        as the patch adds only tokens absent from the base. ``onto`` lets a
        caller extend an earlier transplant instead of the raw base.
        """
        donor = donor or self.donor
        onto = onto or self.base
        ids = self.exclusive_ids(donor) if ids is None else ids
        if not ids:
            return onto.copy()
        new_rows = np.empty((len(ids), self.base.dim))
        for r, tid in enumerate(ids):
            new_rows[r], _ = self.synthesize(self.query(donor, tid))
        tokens = [donor.vocab[i] for i in ids]
        head = None if onto.head is None else np.vstack([onto.head, new_rows])
        meta = dict(onto.meta)
        meta["transplant"] = {"op": self.op, "params": self.params.to_dict(),
                              "n_shared": len(self.alignment),
                              "n_new": len(onto.vocab) - len(self.base.vocab) + len(ids)}
        return ModelBundle(
            embeddings=np.vstack([onto.embeddings, new_rows]),
            vocab=onto.vocab.extended(tokens),
            head=head,
            tied=onto.tied,
            meta=meta,
        )


def transplant_vocab(base: ModelBundle, donor: ModelBundle, op: str = "omp",
                     params: TransplantParams | None = None) -> ModelBundle:
    """Base vocab followed by donor-exclusive tokens in donor-id order.

    Pre-existing base rows are copied bit-for-bit. When the base has an
    untied head, each new head row is the same synthesized vector as the
    embedding row.
    """
    return Transplanter(base, donor, op, params).transplant()
