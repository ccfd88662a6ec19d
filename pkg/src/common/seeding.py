"""Deterministic seed derivation for parallel work items"""

import hashlib
from typing import Union

Label = Union[str, int]


def derive_seed(base: int, *labels: Label) -> int:
    """Hash ``base`` and ``labels`` into a 32-bit seed.

    The result depends only on the identity of the work item, so the same
    item gets the same random stream whatever worker runs it.
    """
    payload = "\x1f".join([str(int(base))] + [str(label) for label in labels])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")
