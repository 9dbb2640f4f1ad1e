"""Frozen synthetic prompt composer and embedding tables.

The composer stands in for a frozen text encoder: it turns a prompt template
plus inserted token vectors into a unit-norm embedding, is differentiable
with respect to the inserted tokens, and never exposes gradients for its own
weights. One backbone (W1, b1, W2) is shared by all templates; each template
contributes its own template vector and lays its slots out at fixed positions
of the backbone input, with unused slot positions held at zero. Sharing the
backbone across templates mirrors a single encoder processing every prompt,
which is the property downstream composition relies on.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, MissingIdError, ShapeError, TemplateError

# Template name -> slot arity. "photo_of" hosts a single token ("a photo of
# [token]"); "photo_of_that" hosts a token plus a condition embedding
# ("a photo of [token] that [cond]").
TEMPLATES: dict[str, int] = {"photo_of": 1, "photo_of_that": 2}
MAX_SLOTS = 2

# Pinned PRNG for frozen weights; recorded in config echoes so goldens are
# regenerable.
PRNG_NAME = "numpy-pcg64"

# Relative size of the per-template increment over the shared base prompt
# vector.
TEMPLATE_INCREMENT = 0.25


@dataclass(frozen=True)
class ComposerSpec:
    dim: int
    seed: int
    templates: dict[str, int] = field(default_factory=lambda: dict(TEMPLATES))

    def __post_init__(self):
        if self.dim < 2:
            raise ShapeError(f"composer dim must be >= 2, got {self.dim}")
        if self.templates != TEMPLATES:
            raise TemplateError(f"unsupported template set: {self.templates}")

    @property
    def hidden(self) -> int:
        return 2 * self.dim


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class PromptComposer:
    """Seed-derived frozen two-layer tanh network over (template, slots)."""

    def __init__(self, spec: ComposerSpec):
        self.spec = spec
        d, h = spec.dim, spec.hidden
        in_dim = (1 + MAX_SLOTS) * d
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        # Draw order is part of the format: template vectors in sorted name
        # order, then W1, b1, W2. The templates are prompts sharing most of
        # their wording, so every template vector is the same base vector
        # plus a small per-template increment; a template switch must nudge
        # the composition, not re-randomize it.
        base = rng.standard_normal(d)
        base /= np.linalg.norm(base)
        self._template_vectors: dict[str, np.ndarray] = {}
        for name in sorted(spec.templates):
            extra = rng.standard_normal(d)
            extra /= np.linalg.norm(extra)
            v = base + TEMPLATE_INCREMENT * extra
            self._template_vectors[name] = (v / np.linalg.norm(v)).astype(np.float32)
        self._w1 = _uniform(rng, (in_dim, h), fan_in=in_dim)
        self._b1 = _uniform(rng, (h,), fan_in=in_dim)
        self._w2 = _uniform(rng, (h, d), fan_in=h)
        # Frozen weights enter the graph as non-trainable tensors.
        self._w1_t = Tensor(self._w1)
        self._b1_t = Tensor(self._b1)
        self._w2_t = Tensor(self._w2)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def weights_hash(self) -> str:
        """SHA-256 over all frozen arrays; stable across runs of one seed."""
        digest = hashlib.sha256()
        for name in sorted(self._template_vectors):
            digest.update(name.encode())
            digest.update(self._template_vectors[name].tobytes())
        for arr in (self._w1, self._b1, self._w2):
            digest.update(arr.tobytes())
        return digest.hexdigest()

    def _template_arity(self, template: str) -> int:
        try:
            return self.spec.templates[template]
        except KeyError:
            raise TemplateError(f"unknown template {template!r}") from None

    def compose_rows(self, template: str, slot_rows: list[Tensor]) -> Tensor:
        """Compose a batch: each slot argument is an [N x d] block of row vectors."""
        arity = self._template_arity(template)
        if len(slot_rows) != arity:
            raise TemplateError(
                f"template {template!r} takes {arity} slot(s), got {len(slot_rows)}"
            )
        d = self.spec.dim
        for s in slot_rows:
            if s.values.ndim != 2 or s.shape[1] != d:
                raise ShapeError(f"slot block must be [N x {d}], got {s.shape}")
        n = slot_rows[0].shape[0]
        if any(s.shape[0] != n for s in slot_rows):
            raise ShapeError("slot blocks disagree on batch size")

        tmpl = Tensor(np.tile(self._template_vectors[template], (n, 1)))
        blocks = [tmpl] + list(slot_rows)
        for _ in range(MAX_SLOTS - arity):
            blocks.append(Tensor(np.zeros((n, d), dtype=np.float32)))
        x = ad.concat(blocks, axis=1)
        hidden = ad.tanh(ad.add_rowvec(ad.matmul(x, self._w1_t), self._b1_t))
        return ad.l2_normalize_rows(ad.matmul(hidden, self._w2_t))

    def compose(self, template: str, slots: list[Tensor]) -> Tensor:
        """Compose a single prompt from 1-D slot vectors into a unit vector."""
        rows = []
        for s in slots:
            if s.values.ndim != 1:
                raise ShapeError(f"slot must be a 1-D vector, got {s.shape}")
            rows.append(ad.reshape(s, (1, s.shape[0])))
        out = self.compose_rows(template, rows)
        return ad.reshape(out, (self.spec.dim,))

    def prompt_text(self, cond: Tensor) -> Tensor:
        """Embed 'a photo of [cond]' for a single condition vector."""
        return self.compose("photo_of", [cond])

    def prompt_text_rows(self, cond_rows: Tensor) -> Tensor:
        return self.compose_rows("photo_of", [cond_rows])


class EmbeddingTable:
    """Immutable id -> unit vector map backing precomputed embeddings."""

    @classmethod
    def load(cls, path, role: str) -> "EmbeddingTable":
        from . import fileio

        matrix, ids = fileio.read_embeddings(path)
        return cls(ids, matrix, role)

    def __init__(self, ids: list[str], vectors: np.ndarray, role: str):
        if role not in ("image", "text"):
            raise ShapeError(f"role must be 'image' or 'text', got {role!r}")
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
            raise ShapeError("ids and vectors disagree")
        if len(set(ids)) != len(ids):
            raise ShapeError("duplicate ids in embedding table")
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1, keepdims=True)
        if not np.all(norms > 1e-6):
            bad = int(np.argmin(norms))
            raise DegenerateInputError(f"table row {bad} ({ids[bad]}) has near-zero norm")
        # Renormalize on load; tolerates lossy 32-bit storage.
        self._vectors = (vectors.astype(np.float64) / norms).astype(np.float32)
        self._vectors.flags.writeable = False
        self.ids = list(ids)
        self.role = role
        self._index = {i: row for row, i in enumerate(ids)}

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> Tensor:
        """Fetch the stored unit vector; encoders are frozen, so no gradient."""
        try:
            row = self._index[key]
        except KeyError:
            raise MissingIdError(f"id {key!r} not present in {self.role} table") from None
        return Tensor(self._vectors[row])

    def get_array(self, key: str) -> np.ndarray:
        try:
            row = self._index[key]
        except KeyError:
            raise MissingIdError(f"id {key!r} not present in {self.role} table") from None
        return self._vectors[row]

    def matrix(self) -> np.ndarray:
        return self._vectors


def encode_pair(table: EmbeddingTable, key: str) -> Tensor:
    """Fetch the stored unit vector for an id; encoders are frozen."""
    return table.get(key)
