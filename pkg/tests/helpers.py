from __future__ import annotations

import numpy as np

from protoseg.bank import Kind, Polarity, Prototype, PrototypeBank


def bank_from_vectors(table, space, kind=Kind.INSTANCE, meta=None):
    """``table``: category -> {"fg": [vectors], "bg": [vectors]} of instance prototypes."""
    bank = PrototypeBank(meta or {})
    for cat, pols in table.items():
        protos = []
        for pol_name, vecs in pols.items():
            for i, v in enumerate(vecs):
                index = {"sample_index": i} if kind is Kind.INSTANCE else {"cluster": i}
                protos.append(Prototype(np.asarray(v, dtype=np.float32), space, Polarity(pol_name), kind, cat,
                                        pixel_count=1, **index))
        bank.add_category(cat, {space: protos})
    return bank
