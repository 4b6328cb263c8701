"""Substitution strategies for absent modalities.

Three ways to classify when a modality's input is unavailable:

* ``mmt``    learned missing-modality token. One vector per modality; a
             substituted sample keeps its sequence length but every content
             embedding becomes that vector (positions are added afterwards,
             so token i reads mmt + pos[i]). The vector is trained by
             randomly replacing present modalities during training.
* ``zeros``  zero the raw input and tokenize as usual.
* ``skip``   drop the branch: the model runs on the modalities that remain
             and the readout averages over those only.

Substitution is a mask blend, ``out = (1-m)*content + m*sub`` with m in
{0.0, 1.0}: replaced rows are bit-identical regardless of the underlying
input, and the gradient into replaced content is exactly zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DimensionError
from .model import MODALITIES
from .rng import Stream


class SubstitutionMethod(enum.Enum):
    MMT = "mmt"
    ZEROS = "zeros"
    SKIP = "skip"

    @classmethod
    def parse(cls, name: str) -> "SubstitutionMethod":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(
                f"unknown substitution method {name!r}; expected one of "
                f"{[m.value for m in cls]}"
            ) from None


class MmtBank:
    """Learned substitution vectors, one per modality that can go missing."""

    def __init__(self, dim: int, tensors: dict[str, Tensor]):
        self.dim = dim
        self.tensors = tensors

    def __getitem__(self, modality: str) -> Tensor:
        try:
            return self.tensors[f"mmt.{modality}"]
        except KeyError:
            raise ConfigError(f"no substitution token for modality {modality!r}") from None

    def parameter_list(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def init(cls, dim: int, seed: int, modalities=MODALITIES) -> "MmtBank":
        rng = Stream(seed, "mmt-init").numpy_rng()
        return cls(dim, {f"mmt.{m}": Tensor(rng.normal(0.0, 0.02, size=dim)) for m in modalities})

    @classmethod
    def from_arrays(cls, dim: int, arrays: dict[str, np.ndarray]) -> "MmtBank":
        tensors = {}
        for name, arr in arrays.items():
            if not name.startswith("mmt."):
                raise ConfigError(f"{name!r} is not a substitution-token name")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != (dim,):
                raise DimensionError(f"{name}: shape {arr.shape} != ({dim},)")
            tensors[name] = Tensor(arr)
        return cls(dim, tensors)


def replace_with_mmt(
    bank: MmtBank, modality: str, content: Tensor, replace: np.ndarray
) -> Tensor:
    """Swap whole samples' content embeddings for the modality's token.

    ``replace`` is a boolean (batch,) mask. Rows where it is set come out
    as the token broadcast over every position; other rows pass through
    untouched.
    """
    replace = np.asarray(replace, dtype=bool)
    if replace.shape != (content.shape[0],):
        raise DimensionError(
            f"replace mask shape {replace.shape} != (batch,) = ({content.shape[0]},)"
        )
    if not replace.any():
        return content
    m = Tensor(replace.astype(np.float64)[:, None, None])
    token = ad.broadcast_to(ad.reshape(bank[modality], (1, 1, bank.dim)), content.shape)
    return ad.add(ad.mul(content, ad.sub(Tensor(1.0), m)), ad.mul(token, m))


def substitute_zeros(patches: np.ndarray, replace: np.ndarray) -> np.ndarray:
    """Zero the raw patches of replaced samples; tokenization then proceeds
    as if a silent/black input had been recorded."""
    replace = np.asarray(replace, dtype=bool)
    if replace.shape != (patches.shape[0],):
        raise DimensionError(
            f"replace mask shape {replace.shape} != (batch,) = ({patches.shape[0]},)"
        )
    out = patches.copy()
    out[replace] = 0.0
    return out


def substitute_skip(
    missing: dict[str, np.ndarray],
) -> list[tuple[tuple[str, ...], np.ndarray]]:
    """Partition a batch by which modalities remain present.

    ``missing`` maps modality name to a boolean (batch,) mask. Returns
    (present_modalities, sample_indices) groups in a fixed order; every
    index appears in exactly one group. A group with no present modalities
    is returned too, for the caller to score as it sees fit.
    """
    names = [m for m in MODALITIES if m in missing]
    n = len(next(iter(missing.values())))
    for m, mask in missing.items():
        if np.asarray(mask).shape != (n,):
            raise DimensionError(f"missing mask for {m} has shape {np.asarray(mask).shape}")
    key = np.zeros(n, dtype=np.int64)
    for bit, m in enumerate(names):
        key += (~np.asarray(missing[m], dtype=bool)).astype(np.int64) << bit
    groups = []
    for pattern in sorted(set(key.tolist()), reverse=True):
        present = tuple(m for bit, m in enumerate(names) if pattern >> bit & 1)
        groups.append((present, np.flatnonzero(key == pattern)))
    return groups


@dataclass(frozen=True)
class TrainMissingPolicy:
    """Random-replace schedule used while training substitution tokens.

    ``probs`` gives, for each modality, the chance that a modal-complete
    sample has that modality swapped for its token in a given epoch. Draws
    are mutually exclusive: one uniform per complete sample decides which
    modality (if any) is replaced, so two modalities are never dropped from
    the same sample. Samples that arrive modally incomplete are always
    substituted for their absent modalities and consume no draw.
    """

    probs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for m, p in self.probs.items():
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r} in replace policy")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"replace probability for {m} is {p}, outside [0, 1]")
        if sum(self.probs.values()) > 1.0 + 1e-12:
            raise ConfigError("replace probabilities sum past 1; draws are exclusive")

    @property
    def active(self) -> bool:
        return any(p > 0 for p in self.probs.values())


def random_replace(
    policy: TrainMissingPolicy,
    stream: Stream,
    natural_missing: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Decide which samples get substituted this pass.

    ``natural_missing`` holds the dataset's own absence masks in visit
    order. The result marks those samples unconditionally and adds random
    replacements for complete samples, consuming exactly one uniform per
    complete sample so the stream stays aligned whatever the probabilities.
    """
    names = [m for m in MODALITIES if m in natural_missing]
    masks = {m: np.asarray(natural_missing[m], dtype=bool).copy() for m in names}
    n = len(masks[names[0]])
    complete = ~np.logical_or.reduce([masks[m] for m in names])
    ordered = [m for m in names if policy.probs.get(m, 0.0) > 0.0]
    for i in range(n):
        if not complete[i]:
            continue
        u = stream.uniform()
        lo = 0.0
        for m in ordered:
            hi = lo + policy.probs[m]
            if lo <= u < hi:
                masks[m][i] = True
                break
            lo = hi
    return masks


def mmt_gradient_mask_check(batch: int = 6, tokens: int = 5, dim: int = 8, seed: int = 0) -> dict:
    """Measure gradient leakage across the substitution boundary.

    Returns the largest gradient magnitude reaching (a) replaced content
    rows and (b) the token when nothing was replaced. Both must be exactly
    zero: substitution is a hard swap, not an interpolation.
    """
    rng = np.random.default_rng(seed)
    bank = MmtBank.init(dim, seed=seed, modalities=("audio",))
    replace = np.zeros(batch, dtype=bool)
    replace[:: 2] = True

    content = Tensor(rng.standard_normal((batch, tokens, dim)))
    with Tape() as tape:
        out = replace_with_mmt(bank, "audio", content, replace)
        loss = ad.mean(ad.mul(out, Tensor(rng.standard_normal(out.shape))))
        tape.backward(loss)
    leak_content = float(np.abs(content.grad[replace]).max())

    bank2 = MmtBank.init(dim, seed=seed, modalities=("audio",))
    content2 = Tensor(rng.standard_normal((batch, tokens, dim)))
    with Tape() as tape:
        out = replace_with_mmt(bank2, "audio", content2, np.zeros(batch, dtype=bool))
        loss = ad.mean(ad.mul(out, Tensor(rng.standard_normal(out.shape))))
        tape.backward(loss)
    g = bank2["audio"].grad
    leak_token = 0.0 if g is None else float(np.abs(g).max())
    return {"replaced_content_grad": leak_content, "idle_token_grad": leak_token}
