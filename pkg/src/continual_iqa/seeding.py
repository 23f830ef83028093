from __future__ import annotations

import numpy as np
import torch


def derive_seed(*parts: int) -> int:
    """Stable 31-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0] & 0x7FFFFFFF)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen
