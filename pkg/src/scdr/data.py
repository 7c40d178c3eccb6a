"""Rating data ingestion, cross-domain scenarios, and synthetic generators.

A scenario couples a source and a target domain that share users but no
items. Overlapping users are split by a seeded shuffle into a mapping-train
set and a cold-start test set; the target-domain history of test users is
withheld from every training stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestError, MissingInputError, ValidationError

MANIFEST_VERSION = 1
SIDECAR_VERSION = 1


@dataclass
class RatingTriple:
    """One observed (user, item, rating) interaction."""

    user_id: str
    item_id: str
    rating: float

    def __post_init__(self):
        if not self.user_id:
            raise ValidationError("user_id must be non-empty")
        if not self.item_id:
            raise ValidationError("item_id must be non-empty")
        self.rating = float(self.rating)
        if not math.isfinite(self.rating):
            raise ValidationError(f"rating must be finite, got {self.rating!r}")


@dataclass
class RatingFileFormat:
    """Shape of a delimited rating file: one (user, item, rating) per line."""

    delimiter: str = ","
    has_header: bool = False


@dataclass
class DomainDataset:
    """Users, items, and observed interactions of one domain.

    Tokens get dense indices in first-appearance order. ``interactions``
    are parallel arrays (user_index, item_index, rating); (user, item)
    pairs are unique, duplicates having been collapsed last-write-wins at
    construction time with the overwrite count kept in ``duplicate_count``.
    """

    users: tuple[str, ...]
    items: tuple[str, ...]
    user_index: np.ndarray
    item_index: np.ndarray
    rating: np.ndarray
    duplicate_count: int = 0
    _per_user: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.user_index = np.asarray(self.user_index, dtype=np.int64)
        self.item_index = np.asarray(self.item_index, dtype=np.int64)
        self.rating = np.asarray(self.rating, dtype=np.float64)
        if len(self.users) < 1 or len(self.items) < 1:
            raise ValidationError("dataset must contain at least one user and one item")
        if not (self.user_index.shape == self.item_index.shape == self.rating.shape):
            raise ValidationError("interaction arrays must share a shape")
        if self.n_interactions == 0:
            raise ValidationError("dataset must contain at least one interaction")
        if self.user_index.min() < 0 or self.user_index.max() >= self.n_users:
            raise ValidationError("interaction references an invalid user index")
        if self.item_index.min() < 0 or self.item_index.max() >= self.n_items:
            raise ValidationError("interaction references an invalid item index")
        if not np.all(np.isfinite(self.rating)):
            raise ValidationError("ratings must be finite")
        keys = self.user_index * len(self.items) + self.item_index
        if np.unique(keys).size != keys.size:
            raise ValidationError("duplicate (user, item) interaction pairs")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_interactions(self) -> int:
        return int(self.user_index.size)

    @classmethod
    def from_triples(cls, triples) -> "DomainDataset":
        """Build a dataset from token triples, collapsing duplicates last-write-wins."""
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        cells: dict[tuple[int, int], float] = {}
        order: list[tuple[int, int]] = []
        duplicates = 0
        for t in triples:
            u = users.setdefault(t.user_id, len(users))
            v = items.setdefault(t.item_id, len(items))
            key = (u, v)
            if key in cells:
                duplicates += 1
            else:
                order.append(key)
            cells[key] = t.rating
        if not cells:
            raise IngestError("empty dataset: no interactions")
        ui = np.array([k[0] for k in order], dtype=np.int64)
        vi = np.array([k[1] for k in order], dtype=np.int64)
        r = np.array([cells[k] for k in order], dtype=np.float64)
        return cls(tuple(users), tuple(items), ui, vi, r, duplicate_count=duplicates)

    def user_interactions(self, user_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Item indices and ratings observed for one user."""
        if not 0 <= user_index < self.n_users:
            raise ValidationError(f"user index {user_index} out of range")
        if self._per_user is None:
            per_user: dict[int, list[int]] = {}
            for pos, u in enumerate(self.user_index.tolist()):
                per_user.setdefault(u, []).append(pos)
            self._per_user = {u: np.array(p, dtype=np.int64) for u, p in per_user.items()}
        pos = self._per_user.get(int(user_index))
        if pos is None:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        return self.item_index[pos], self.rating[pos]

    def filter_users(self, drop_user_indices) -> "DomainDataset":
        """Copy with all interactions of the given users removed; index space unchanged."""
        drop = set(int(u) for u in drop_user_indices)
        keep = np.array([u not in drop for u in self.user_index.tolist()], dtype=bool)
        if not keep.any():
            raise ValidationError("filtering removed every interaction")
        return DomainDataset(
            self.users,
            self.items,
            self.user_index[keep],
            self.item_index[keep],
            self.rating[keep],
            duplicate_count=self.duplicate_count,
        )


def ingest_domain(path, fmt: RatingFileFormat | None = None) -> DomainDataset:
    """Parse a delimited rating file into a :class:`DomainDataset`.

    Malformed rows raise :class:`IngestError` naming the 1-based line
    number; duplicate (user, item) pairs collapse last-write-wins.
    """
    fmt = fmt or RatingFileFormat()
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"rating file not found: {path}")
    triples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if fmt.has_header and lineno == 1:
                continue
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(fmt.delimiter)
            if len(parts) != 3:
                raise IngestError(
                    f"expected 3 fields separated by {fmt.delimiter!r}, got {len(parts)}",
                    row=lineno,
                )
            user, item, raw = (p.strip() for p in parts)
            try:
                rating = float(raw)
            except ValueError:
                raise IngestError(f"rating {raw!r} is not a number", row=lineno) from None
            if not math.isfinite(rating):
                raise IngestError(f"rating {raw!r} is not finite", row=lineno)
            if not user or not item:
                raise IngestError("empty user or item token", row=lineno)
            triples.append(RatingTriple(user, item, rating))
    if not triples:
        raise IngestError(f"empty dataset: {path}")
    return DomainDataset.from_triples(triples)


def write_ratings(dataset: DomainDataset, path, fmt: RatingFileFormat | None = None) -> None:
    """Write a dataset back out as a delimited rating file (exact float text)."""
    fmt = fmt or RatingFileFormat()
    lines = []
    if fmt.has_header:
        lines.append(fmt.delimiter.join(("user", "item", "rating")))
    for u, v, r in zip(dataset.user_index.tolist(), dataset.item_index.tolist(), dataset.rating.tolist()):
        lines.append(fmt.delimiter.join((dataset.users[u], dataset.items[v], repr(r))))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class CdrScenario:
    """Two domains with overlapping users and a seeded cold-start split.

    ``overlap`` pairs (source_user_index, target_user_index) for every
    shared user token; ``train_pairs`` and ``test_pairs`` partition it.
    """

    source: DomainDataset
    target: DomainDataset
    overlap: list[tuple[int, int]]
    beta: float
    seed: int
    train_pairs: list[tuple[int, int]]
    test_pairs: list[tuple[int, int]]

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValidationError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.overlap:
            raise ValidationError("overlap is empty")
        if sorted(self.train_pairs + self.test_pairs) != sorted(self.overlap):
            raise ValidationError("train/test pairs do not partition the overlap")
        if set(self.train_pairs) & set(self.test_pairs):
            raise ValidationError("train/test pairs intersect")

    @property
    def train_user_tokens(self) -> list[str]:
        return [self.source.users[s] for s, _ in self.train_pairs]

    @property
    def test_user_tokens(self) -> list[str]:
        return [self.source.users[s] for s, _ in self.test_pairs]

    def target_training_dataset(self) -> DomainDataset:
        """Target dataset with every test user's interactions withheld."""
        return self.target.filter_users(t for _, t in self.test_pairs)

    def withheld_interactions(self) -> list[tuple[int, int, np.ndarray, np.ndarray]]:
        """Per test user: (source_idx, target_idx, item indices, ratings) held out of training."""
        out = []
        for s, t in self.test_pairs:
            items, ratings = self.target.user_interactions(t)
            out.append((s, t, items, ratings))
        return out


def compute_overlap(source: DomainDataset, target: DomainDataset) -> list[tuple[int, int]]:
    """Index pairs of users whose tokens appear in both domains, in source order."""
    target_pos = {tok: i for i, tok in enumerate(target.users)}
    return [(i, target_pos[tok]) for i, tok in enumerate(source.users) if tok in target_pos]


def split_overlap(n_overlap: int, beta: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded uniform shuffle assigning ceil(beta * n) overlap positions to test."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_overlap)
    n_test = int(math.ceil(beta * n_overlap - 1e-9))
    test = sorted(int(i) for i in perm[:n_test])
    train = sorted(int(i) for i in perm[n_test:])
    return train, test


def build_scenario(source: DomainDataset, target: DomainDataset, beta: float, seed: int) -> CdrScenario:
    """Pair two domains and split the overlapping users into train/test sets.

    Overlap is computed by user-token equality. A seeded uniform shuffle
    assigns ``ceil(beta * |overlap|)`` users to the cold-start test set;
    the same inputs and seed always produce the same partition.
    """
    if not 0.0 < float(beta) < 1.0:
        raise ValidationError(f"beta must lie in (0, 1), got {beta}")
    shared_items = set(source.items) & set(target.items)
    if shared_items:
        raise ValidationError(
            f"domains share {len(shared_items)} item tokens; item sets must be disjoint"
        )
    overlap = compute_overlap(source, target)
    if not overlap:
        raise ValidationError("no overlapping users between the domains")
    train_pos, test_pos = split_overlap(len(overlap), float(beta), int(seed))
    return CdrScenario(
        source=source,
        target=target,
        overlap=overlap,
        beta=float(beta),
        seed=int(seed),
        train_pairs=[overlap[i] for i in train_pos],
        test_pairs=[overlap[i] for i in test_pos],
    )


@dataclass
class SyntheticSpec:
    """Descriptor for a generated two-domain scenario.

    Overlapping users share tokens across domains and their target latent
    vectors are a fixed smooth transform of their source latents:
    ``identity`` (degenerate linear), ``linear`` (rotation about the latent
    mean), or ``tanh`` (tanh-warped rotation).
    """

    users: int = 2000
    items: int = 500
    overlap_ratio: float = 0.05
    dim: int = 10
    noise: float = 0.1
    map_kind: str = "linear"
    seed: int = 0
    beta: float = 0.5
    ratings_per_user: int = 30

    def __post_init__(self):
        if self.users < 1 or self.items < 1:
            raise ValidationError("user and item counts must be >= 1")
        if not 0.0 < self.overlap_ratio <= 1.0:
            raise ValidationError(f"overlap_ratio must lie in (0, 1], got {self.overlap_ratio}")
        if self.dim < 1:
            raise ValidationError("latent dim must be >= 1")
        if self.noise < 0.0:
            raise ValidationError("noise level must be >= 0")
        if self.map_kind not in ("identity", "linear", "tanh"):
            raise ValidationError(f"unknown map kind {self.map_kind!r}")
        if not 0.0 < self.beta < 1.0:
            raise ValidationError(f"beta must lie in (0, 1), got {self.beta}")
        if not 1 <= self.ratings_per_user <= self.items:
            raise ValidationError("ratings_per_user must lie in [1, items]")


@dataclass
class SyntheticSidecar:
    """Planted ground truth of a synthetic scenario, kept apart from training data."""

    source_user_latents: np.ndarray
    target_user_latents: np.ndarray
    source_item_latents: np.ndarray
    target_item_latents: np.ndarray
    latent_mean: np.ndarray
    map_kind: str
    map_matrix: np.ndarray
    seed: int


# Latent scale: component mean sqrt(3/d) centres inner products at 3 on the
# 1-5 rating scale; spread 1.25/d keeps most products inside the scale.
_LATENT_MEAN_SQ = 3.0
_LATENT_VAR = 1.25
_TANH_WARP = 0.5


def _overlap_transform(latents: np.ndarray, mean: np.ndarray, kind: str, q: np.ndarray) -> np.ndarray:
    centered = latents - mean
    if kind == "identity":
        return latents.copy()
    if kind == "linear":
        return mean + centered @ q.T
    if kind == "tanh":
        z = centered @ q.T
        return mean + _TANH_WARP * np.tanh(z / _TANH_WARP)
    raise ValidationError(f"unknown map kind {kind!r}")


def generate_synthetic(spec: SyntheticSpec) -> tuple[CdrScenario, SyntheticSidecar]:
    """Generate a seeded two-domain scenario with planted latent structure.

    Ratings are ``clip(<u, v> + noise * N(0, 1), 1, 5)`` over a seeded
    random item subset per user. Returns the scenario together with a
    sidecar recording the planted latents, for oracle tests only.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    mean = np.full(d, math.sqrt(_LATENT_MEAN_SQ / d))
    std = math.sqrt(_LATENT_VAR / d)

    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    n_overlap = int(spec.overlap_ratio * spec.users)
    if n_overlap < 1:
        raise ValidationError("overlap ratio yields zero overlapping users")
    n_solo = spec.users - n_overlap

    overlap_src = mean + std * rng.standard_normal((n_overlap, d))
    source_solo = mean + std * rng.standard_normal((n_solo, d))
    target_solo = mean + std * rng.standard_normal((n_solo, d))
    source_items = mean + std * rng.standard_normal((spec.items, d))
    target_items = mean + std * rng.standard_normal((spec.items, d))
    overlap_tgt = _overlap_transform(overlap_src, mean, spec.map_kind, q)

    overlap_tokens = [f"u{i:06d}" for i in range(n_overlap)]
    source_users = overlap_tokens + [f"su{i:06d}" for i in range(n_solo)]
    target_users = overlap_tokens + [f"tu{i:06d}" for i in range(n_solo)]
    source_user_latents = np.vstack([overlap_src, source_solo]) if n_solo else overlap_src
    target_user_latents = np.vstack([overlap_tgt, target_solo]) if n_solo else overlap_tgt

    def emit(user_latents, item_latents, prefix):
        tokens = [f"{prefix}{j:06d}" for j in range(spec.items)]
        ui, vi, rr = [], [], []
        for i in range(user_latents.shape[0]):
            chosen = rng.choice(spec.items, size=spec.ratings_per_user, replace=False)
            raw = user_latents[i] @ item_latents[chosen].T
            if spec.noise > 0.0:
                raw = raw + spec.noise * rng.standard_normal(spec.ratings_per_user)
            ui.append(np.full(spec.ratings_per_user, i, dtype=np.int64))
            vi.append(np.asarray(chosen, dtype=np.int64))
            rr.append(np.clip(raw, 1.0, 5.0))
        return tokens, np.concatenate(ui), np.concatenate(vi), np.concatenate(rr)

    s_tokens, s_ui, s_vi, s_r = emit(source_user_latents, source_items, "si")
    t_tokens, t_ui, t_vi, t_r = emit(target_user_latents, target_items, "ti")

    source = DomainDataset(tuple(source_users), tuple(s_tokens), s_ui, s_vi, s_r)
    target = DomainDataset(tuple(target_users), tuple(t_tokens), t_ui, t_vi, t_r)
    scenario = build_scenario(source, target, spec.beta, spec.seed)
    sidecar = SyntheticSidecar(
        source_user_latents=source_user_latents,
        target_user_latents=target_user_latents,
        source_item_latents=source_items,
        target_item_latents=target_items,
        latent_mean=mean,
        map_kind=spec.map_kind,
        map_matrix=q,
        seed=spec.seed,
    )
    return scenario, sidecar


def save_manifest(scenario: CdrScenario, path, source_ratings: str, target_ratings: str,
                  sidecar: str | None = None) -> None:
    """Write the scenario manifest: paths, beta, seed, and split membership.

    Paths are stored as given (conventionally relative to the manifest's
    own directory) so a run directory is relocatable and byte-stable.
    """
    doc = {
        "format_version": MANIFEST_VERSION,
        "source_ratings": source_ratings,
        "target_ratings": target_ratings,
        "beta": scenario.beta,
        "seed": scenario.seed,
        "train_users": scenario.train_user_tokens,
        "test_users": scenario.test_user_tokens,
    }
    if sidecar is not None:
        doc["sidecar"] = sidecar
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_scenario(manifest_path, fmt: RatingFileFormat | None = None) -> CdrScenario:
    """Rebuild a scenario from its manifest, trusting the stored membership lists."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingInputError(f"manifest not found: {manifest_path}")
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {doc.get('format_version')!r}")
    base = manifest_path.parent
    source = ingest_domain(base / doc["source_ratings"], fmt)
    target = ingest_domain(base / doc["target_ratings"], fmt)
    shared_items = set(source.items) & set(target.items)
    if shared_items:
        raise ValidationError("domains share item tokens; item sets must be disjoint")
    overlap = compute_overlap(source, target)
    if not overlap:
        raise ValidationError("no overlapping users between the domains")
    beta, seed = float(doc["beta"]), int(doc["seed"])
    if "train_users" in doc and "test_users" in doc:
        by_token = {source.users[s]: (s, t) for s, t in overlap}
        missing = [u for u in doc["train_users"] + doc["test_users"] if u not in by_token]
        if missing:
            raise ValidationError(f"manifest split names non-overlap users: {missing[:3]}")
        train_pairs = [by_token[u] for u in doc["train_users"]]
        test_pairs = [by_token[u] for u in doc["test_users"]]
        return CdrScenario(source, target, overlap, beta, seed, train_pairs, test_pairs)
    return build_scenario(source, target, beta, seed)


def save_sidecar(sidecar: SyntheticSidecar, path) -> None:
    doc = {
        "format_version": SIDECAR_VERSION,
        "map_kind": sidecar.map_kind,
        "seed": sidecar.seed,
        "latent_mean": sidecar.latent_mean.tolist(),
        "map_matrix": sidecar.map_matrix.tolist(),
        "source_user_latents": sidecar.source_user_latents.tolist(),
        "target_user_latents": sidecar.target_user_latents.tolist(),
        "source_item_latents": sidecar.source_item_latents.tolist(),
        "target_item_latents": sidecar.target_item_latents.tolist(),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_sidecar(path) -> SyntheticSidecar:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"sidecar not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format_version") != SIDECAR_VERSION:
        raise ValidationError(f"unsupported sidecar version {doc.get('format_version')!r}")
    return SyntheticSidecar(
        source_user_latents=np.asarray(doc["source_user_latents"], dtype=np.float64),
        target_user_latents=np.asarray(doc["target_user_latents"], dtype=np.float64),
        source_item_latents=np.asarray(doc["source_item_latents"], dtype=np.float64),
        target_item_latents=np.asarray(doc["target_item_latents"], dtype=np.float64),
        latent_mean=np.asarray(doc["latent_mean"], dtype=np.float64),
        map_kind=doc["map_kind"],
        map_matrix=np.asarray(doc["map_matrix"], dtype=np.float64),
        seed=int(doc["seed"]),
    )
