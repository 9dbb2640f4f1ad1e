"""Seeded synthetic attribute world: training pairs and retrieval tasks with
known ground truth.

Entities are attribute tuples. Each entity has a caption descriptor (a
seeded linear projection of the tuple, normalized); its caption embedding is
that descriptor pushed through the frozen composer's one-slot prompt, i.e.
captions are outputs of the same frozen encoder that embeds prompts at
inference time. Its image embedding is anchored to the two-slot prompt
composed over the entity's own descriptor (the full prompt that describes
the image), plus a second, independent projection of the tuple (the modality
gap) and per-instance Gaussian noise. This models an aligned encoder pair:
paired image/caption embeddings are close but not equal, and both prompt
families the query side uses are correlated with gallery geometry.

Caption collisions (distinct entities with near-identical captions) are
injected at a configured rate in small clusters, which is what makes the
confusable-pair selection fire on realistic batches.

Evaluation tasks pick a gallery entity as reference, flip one attribute, and
target every gallery entity matching the edited tuple. The reference stays in
the gallery, so a pure image query retrieves the reference itself first.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff import Tensor
from .composer import ComposerSpec, PromptComposer
from .errors import FormatError, InconsistentSpecError
from .retrieval import EvalTask, Gallery, Query


@dataclass(frozen=True)
class WorldSpec:
    n_attributes: int = 6
    n_values_per_attribute: int = 6
    dim: int = 32
    seed: int = 2024
    noise_scale: float = 0.05
    n_train_pairs: int = 2048
    n_eval_queries: int = 64
    gallery_size: int = 256
    composer_seed: int = 2024
    # Collision clusters share one caption descriptor up to a small jitter.
    caption_collision_rate: float = 0.15
    collision_cluster: int = 3
    caption_jitter: float = 0.02
    # Weight of the image-only projection relative to the caption anchor.
    modality_gap: float = 0.25
    # Minimum pairwise Hamming distance between train entity tuples (1 =
    # distinct tuples; 2 = additionally no single-flip neighbors).
    train_min_hamming: int = 1
    # "encoded": captions and image anchors go through the frozen composer
    # (aligned-encoder world, the default). "linear": captions and images are
    # plain normalized projections of the tuple; embeddings of different
    # modalities are then unaligned, which is the harsher reading where
    # confusable-pair selection stays empty without collisions.
    caption_style: str = "encoded"

    def __post_init__(self):
        if self.n_attributes < 2:
            raise InconsistentSpecError("need at least 2 attributes")
        if self.n_values_per_attribute < 2:
            raise InconsistentSpecError("need at least 2 values per attribute")
        if self.gallery_size < self.n_eval_queries:
            raise InconsistentSpecError("gallery_size must be >= n_eval_queries")
        if self.noise_scale < 0:
            raise InconsistentSpecError("noise_scale must be >= 0")
        if not 0.0 <= self.caption_collision_rate <= 1.0:
            raise InconsistentSpecError("caption_collision_rate must lie in [0, 1]")
        if self.collision_cluster < 2:
            raise InconsistentSpecError("collision clusters need at least 2 members")
        if self.train_min_hamming < 1:
            raise InconsistentSpecError("train_min_hamming must be >= 1")
        if self.caption_style not in ("encoded", "linear"):
            raise InconsistentSpecError(
                f"caption_style must be 'encoded' or 'linear', got {self.caption_style!r}"
            )


@dataclass
class World:
    spec: WorldSpec
    train_ids: list[str]
    train_images: np.ndarray
    train_texts: np.ndarray
    train_tuples: np.ndarray
    gallery_ids: list[str]
    gallery_vectors: np.ndarray
    gallery_tuples: np.ndarray
    condition_ids: list[str]
    condition_vectors: np.ndarray
    query_records: list[dict]
    composer_hash: str

    def eval_task(
        self,
        metrics: list[str] | None = None,
        k_values: list[int] | None = None,
        gamma: float = 0.6,
    ) -> EvalTask:
        gallery = Gallery(list(self.gallery_ids), self.gallery_vectors)
        row_of = {i: r for r, i in enumerate(self.gallery_ids)}
        cond_row = {i: r for r, i in enumerate(self.condition_ids)}
        queries = [
            Query(
                query_id=rec["query_id"],
                reference_id=rec["reference_id"],
                reference_emb=self.gallery_vectors[row_of[rec["reference_id"]]],
                condition_id=rec["condition_id"],
                condition_emb=self.condition_vectors[cond_row[rec["condition_id"]]],
                target_ids=frozenset(rec["target_ids"]),
            )
            for rec in self.query_records
        ]
        return EvalTask(
            gallery=gallery,
            queries=queries,
            metrics=metrics or ["recall", "map"],
            k_values=k_values or [1, 5, 10],
            gamma=gamma,
        )


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / norms


def _one_hot(tuples: np.ndarray, n_values: int) -> np.ndarray:
    n, n_attr = tuples.shape
    out = np.zeros((n, n_attr * n_values), dtype=np.float64)
    cols = np.arange(n_attr) * n_values + tuples
    out[np.arange(n)[:, None], cols] = 1.0
    return out


def _sample_separated_tuples(
    rng: np.random.Generator, n: int, n_attr: int, n_values: int, min_hamming: int
) -> np.ndarray:
    accepted = np.empty((0, n_attr), dtype=np.int64)
    attempts = 0
    while accepted.shape[0] < n:
        attempts += 1
        if attempts > 500 * n:
            raise InconsistentSpecError(
                f"cannot place {n} tuples with min Hamming {min_hamming} in "
                f"{n_values}^{n_attr} space"
            )
        cand = rng.integers(0, n_values, size=n_attr)
        if accepted.shape[0]:
            dist = np.sum(accepted != cand, axis=1)
            if int(dist.min()) < min_hamming:
                continue
        accepted = np.vstack([accepted, cand])
    return accepted


class _Embedder:
    """Frozen seeded maps from attribute tuples to descriptor/image space."""

    def __init__(self, spec: WorldSpec, composer: PromptComposer, rng: np.random.Generator):
        feat = spec.n_attributes * spec.n_values_per_attribute
        self.spec = spec
        self.composer = composer
        self.p_text = rng.standard_normal((spec.dim, feat))
        self.p_image = rng.standard_normal((spec.dim, feat))

    def descriptors(self, tuples: np.ndarray) -> np.ndarray:
        return _unit_rows(_one_hot(tuples, self.spec.n_values_per_attribute) @ self.p_text.T)

    def delta_descriptor(self, attribute: int, value: int) -> np.ndarray:
        col = attribute * self.spec.n_values_per_attribute + value
        vec = self.p_text[:, col]
        return vec / np.linalg.norm(vec)

    def captions(self, descriptors: np.ndarray) -> np.ndarray:
        if self.spec.caption_style == "linear":
            return descriptors.copy()
        rows = Tensor(descriptors.astype(np.float32))
        return self.composer.prompt_text_rows(rows).values.astype(np.float64)

    def images(
        self, tuples: np.ndarray, descriptors: np.ndarray, noise_rng: np.random.Generator
    ) -> np.ndarray:
        gap_dirs = _unit_rows(
            _one_hot(tuples, self.spec.n_values_per_attribute) @ self.p_image.T
        )
        noise = noise_rng.standard_normal(gap_dirs.shape)
        if self.spec.caption_style == "linear":
            return _unit_rows(gap_dirs + self.spec.noise_scale * noise)
        rows = Tensor(descriptors.astype(np.float32))
        anchors = self.composer.compose_rows(
            "photo_of_that", [rows, rows]
        ).values.astype(np.float64)
        raw = anchors + self.spec.modality_gap * gap_dirs + self.spec.noise_scale * noise
        return _unit_rows(raw)


def generate_world(spec: WorldSpec) -> World:
    composer = PromptComposer(ComposerSpec(dim=spec.dim, seed=spec.composer_seed))
    streams = [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, k])))
        for k in range(6)
    ]
    rng_proj, rng_train, rng_noise, rng_coll, rng_gallery, rng_query = streams
    embedder = _Embedder(spec, composer, rng_proj)

    # Training pairs.
    train_tuples = _sample_separated_tuples(
        rng_train,
        spec.n_train_pairs,
        spec.n_attributes,
        spec.n_values_per_attribute,
        spec.train_min_hamming,
    )
    descriptors = embedder.descriptors(train_tuples)
    n_colliding = int(spec.caption_collision_rate * spec.n_train_pairs)
    n_clusters = n_colliding // spec.collision_cluster
    if n_clusters > 0:
        member_pool = rng_coll.permutation(spec.n_train_pairs)[
            : n_clusters * spec.collision_cluster
        ]
        for c in range(n_clusters):
            members = member_pool[c * spec.collision_cluster : (c + 1) * spec.collision_cluster]
            base = descriptors[members[0]]
            for m in members[1:]:
                jitter = rng_coll.standard_normal(spec.dim) * spec.caption_jitter
                descriptors[m] = base + jitter
        descriptors = _unit_rows(descriptors)
    train_texts = embedder.captions(descriptors)
    train_images = embedder.images(train_tuples, descriptors, rng_noise)
    train_ids = [f"pair-{i:05d}" for i in range(spec.n_train_pairs)]

    # Gallery: duplicates allowed so that queries can have several targets.
    gallery_tuples = rng_gallery.integers(
        0,
        spec.n_values_per_attribute,
        size=(spec.gallery_size, spec.n_attributes),
    )

    # Queries: flip one attribute of a gallery reference; make sure at least
    # one gallery entity carries the edited tuple, inserting one if needed.
    protected: set[int] = set()
    pending: list[dict] = []
    for q in range(spec.n_eval_queries):
        ref_slot = int(rng_query.integers(spec.gallery_size))
        protected.add(ref_slot)
        attribute = int(rng_query.integers(spec.n_attributes))
        old_value = int(gallery_tuples[ref_slot, attribute])
        shift = int(rng_query.integers(1, spec.n_values_per_attribute))
        new_value = (old_value + shift) % spec.n_values_per_attribute
        edited = gallery_tuples[ref_slot].copy()
        edited[attribute] = new_value
        matches = np.nonzero(np.all(gallery_tuples == edited, axis=1))[0]
        if matches.size:
            protected.add(int(matches[0]))
        else:
            free = [s for s in range(spec.gallery_size) if s not in protected]
            if not free:
                raise InconsistentSpecError(
                    "gallery too small to host all query targets; raise gallery_size"
                )
            slot = free[int(rng_query.integers(len(free)))]
            gallery_tuples[slot] = edited
            protected.add(slot)
        pending.append(
            {
                "query_id": f"query-{q:04d}",
                "ref_slot": ref_slot,
                "attribute": attribute,
                "old_value": old_value,
                "new_value": new_value,
                "edited": edited,
            }
        )

    gallery_descriptors = embedder.descriptors(gallery_tuples)
    gallery_vectors = embedder.images(gallery_tuples, gallery_descriptors, rng_noise)
    gallery_ids = [f"item-{i:05d}" for i in range(spec.gallery_size)]

    condition_ids, condition_rows, query_records = [], [], []
    for rec in pending:
        targets = np.nonzero(np.all(gallery_tuples == rec["edited"], axis=1))[0]
        cond_id = f"cond-{rec['query_id'].split('-')[1]}"
        condition_ids.append(cond_id)
        condition_rows.append(
            embedder.delta_descriptor(rec["attribute"], rec["new_value"])
        )
        query_records.append(
            {
                "query_id": rec["query_id"],
                "reference_id": gallery_ids[rec["ref_slot"]],
                "condition_id": cond_id,
                "target_ids": sorted(gallery_ids[t] for t in targets),
                "attribute": rec["attribute"],
                "old_value": rec["old_value"],
                "new_value": rec["new_value"],
                "edited_tuple": [int(x) for x in rec["edited"]],
            }
        )

    return World(
        spec=spec,
        train_ids=train_ids,
        train_images=train_images.astype(np.float32),
        train_texts=train_texts.astype(np.float32),
        train_tuples=train_tuples,
        gallery_ids=gallery_ids,
        gallery_vectors=gallery_vectors.astype(np.float32),
        gallery_tuples=gallery_tuples,
        condition_ids=condition_ids,
        condition_vectors=np.vstack(condition_rows).astype(np.float32),
        query_records=query_records,
        composer_hash=composer.weights_hash(),
    )


# ---------------------------------------------------------------------------
# export / import

TRAIN_IMAGES = "train_images.emb"
TRAIN_TEXTS = "train_texts.emb"
GALLERY = "gallery.emb"
CONDITIONS = "conditions.emb"
QUERIES = "queries.jsonl"
TASK = "task.json"
WORLD_META = "world_meta.json"


def export_world(
    world: World,
    data_dir: Path,
    metrics: list[str] | None = None,
    k_values: list[int] | None = None,
    gamma: float = 0.6,
) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_embeddings(data_dir / TRAIN_IMAGES, world.train_images, world.train_ids)
    fileio.write_embeddings(data_dir / TRAIN_TEXTS, world.train_texts, world.train_ids)
    fileio.write_embeddings(data_dir / GALLERY, world.gallery_vectors, world.gallery_ids)
    fileio.write_embeddings(data_dir / CONDITIONS, world.condition_vectors, world.condition_ids)
    fileio.write_jsonl(
        data_dir / QUERIES,
        [
            {
                "query_id": rec["query_id"],
                "reference_id": rec["reference_id"],
                "condition_id": rec["condition_id"],
                "target_ids": rec["target_ids"],
            }
            for rec in world.query_records
        ],
    )
    fileio.write_json(
        data_dir / TASK,
        {
            "dim": world.spec.dim,
            "composer_seed": world.spec.composer_seed,
            "gallery": GALLERY,
            "conditions": CONDITIONS,
            "queries": QUERIES,
            "train_images": TRAIN_IMAGES,
            "train_texts": TRAIN_TEXTS,
            "metrics": metrics or ["recall", "map"],
            "k_values": k_values or [1, 5, 10],
            "gamma": gamma,
        },
    )
    fileio.write_json(
        data_dir / WORLD_META,
        {
            "spec": asdict(world.spec),
            "composer_hash": world.composer_hash,
            "gallery_tuples": world.gallery_tuples.tolist(),
            "query_records": world.query_records,
        },
    )


def load_train_pairs(data_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    data_dir = Path(data_dir)
    images, image_ids = fileio.read_embeddings(data_dir / TRAIN_IMAGES)
    texts, text_ids = fileio.read_embeddings(data_dir / TRAIN_TEXTS)
    if image_ids != text_ids:
        raise FormatError(f"{data_dir}: train image/text ids disagree")
    return images, texts


def load_task(data_dir: Path) -> tuple[EvalTask, dict]:
    data_dir = Path(data_dir)
    task_doc = fileio.read_json(data_dir / TASK)
    gallery_matrix, gallery_ids = fileio.read_embeddings(data_dir / task_doc["gallery"])
    cond_matrix, cond_ids = fileio.read_embeddings(data_dir / task_doc["conditions"])
    cond_row = {i: r for r, i in enumerate(cond_ids)}
    gal_row = {i: r for r, i in enumerate(gallery_ids)}
    queries = []
    for rec in fileio.read_jsonl(data_dir / task_doc["queries"]):
        if rec["reference_id"] not in gal_row:
            raise FormatError(f"query {rec['query_id']}: unknown reference id")
        if rec["condition_id"] not in cond_row:
            raise FormatError(f"query {rec['query_id']}: unknown condition id")
        queries.append(
            Query(
                query_id=rec["query_id"],
                reference_id=rec["reference_id"],
                reference_emb=gallery_matrix[gal_row[rec["reference_id"]]],
                condition_id=rec["condition_id"],
                condition_emb=cond_matrix[cond_row[rec["condition_id"]]],
                target_ids=frozenset(rec["target_ids"]),
            )
        )
    task = EvalTask(
        gallery=Gallery(gallery_ids, gallery_matrix),
        queries=queries,
        metrics=list(task_doc["metrics"]),
        k_values=list(task_doc["k_values"]),
        gamma=float(task_doc["gamma"]),
    )
    return task, task_doc
