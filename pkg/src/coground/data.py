"""Datasets: the JSONL sample format, labeled/unlabeled splitting, token
masking, and a synthetic image-narration generator for desk-scale runs.

One sample pairs a set of detected image regions with a tokenized narration
whose mention spans are given. Labels, when present, are coreference chains
over mention indices (singletons implicit) plus an optional gold box per
mention.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SchemaError
from .partitions import Partition
from .validation import check_box, check_mentions, check_token_ids

NP_KIND = "np"
PRON_KIND = "pron"

PAD_ID = 0
MASK_ID = 1
UNK_ID = 2
N_RESERVED = 3


@dataclass(frozen=True)
class MentionSpan:
    """Half-open token span [start, end) of a noun phrase or pronoun."""

    start: int
    end: int
    kind: str

    def __post_init__(self):
        if self.end <= self.start:
            raise SchemaError(f"mentions: span [{self.start}, {self.end}) is empty")
        if self.kind not in (NP_KIND, PRON_KIND):
            raise SchemaError(f"mentions: unknown kind {self.kind!r}")

    @property
    def indices(self) -> list[int]:
        return list(range(self.start, self.end))


@dataclass
class RegionSet:
    """Detected regions: joint feature vectors, boxes, and class ids."""

    features: np.ndarray  # |I| x d_region
    boxes: np.ndarray  # |I| x 4, (x, y, w, h) normalized
    class_ids: list[int]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        n = self.features.shape[0]
        if self.boxes.shape != (n, 4) or len(self.class_ids) != n:
            raise SchemaError(
                f"regions: {n} feature rows but boxes {self.boxes.shape} and "
                f"{len(self.class_ids)} class ids"
            )
        for i, box in enumerate(self.boxes):
            check_box(box, f"regions[{i}].box")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class NarrationTokens:
    token_ids: list[int]
    mentions: list[MentionSpan]

    def __post_init__(self):
        check_token_ids(self.token_ids)
        check_mentions(self.mentions, len(self.token_ids))


@dataclass
class SampleLabels:
    """Gold chains over mention indices plus an optional box per mention."""

    chains: list[list[int]]
    mention_boxes: list[np.ndarray | None]


@dataclass
class Sample:
    id: str
    regions: RegionSet
    narration: NarrationTokens
    labels: SampleLabels | None = None

    @property
    def n_mentions(self) -> int:
        return len(self.narration.mentions)

    def gold_partition(self) -> Partition:
        if self.labels is None:
            raise SchemaError(f"sample {self.id}: no labels")
        return Partition.from_chains(self.labels.chains, self.n_mentions)

    def coref_labels(self) -> tuple[list[list[int]], list[list[int]]]:
        """Per-mention positive (chain mates) and negative (everyone else) sets."""
        return derive_coref_sets(self.gold_partition())

    def without_labels(self) -> "Sample":
        return dataclasses.replace(self, labels=None)


def derive_coref_sets(partition: Partition) -> tuple[list[list[int]], list[list[int]]]:
    """Positives = chain mates, negatives = all non-chain-mates, per mention."""
    n = partition.n_mentions
    cluster_of = partition.cluster_of()
    positives, negatives = [], []
    for m in range(n):
        mates = sorted(cluster_of[m] - {m})
        positives.append(mates)
        negatives.append([j for j in range(n) if j != m and j not in cluster_of[m]])
    return positives, negatives


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise SchemaError(f"line {line}: missing field {key!r}")
    return obj[key]


def sample_from_json(obj: dict, line: int = 0) -> Sample:
    sample_id = _require(obj, "id", line)
    if not isinstance(sample_id, str):
        raise SchemaError(f"line {line}: field 'id' must be a string")
    raw_regions = _require(obj, "regions", line)
    if not raw_regions:
        raise SchemaError(f"line {line}: field 'regions' must be nonempty")
    try:
        regions = RegionSet(
            features=np.array([r["feat"] for r in raw_regions], dtype=np.float64),
            boxes=np.array([r["box"] for r in raw_regions], dtype=np.float64),
            class_ids=[int(r["class_id"]) for r in raw_regions],
        )
        narration = NarrationTokens(
            token_ids=[int(t) for t in _require(obj, "tokens", line)],
            mentions=[
                MentionSpan(int(m["start"]), int(m["end"]), str(m["kind"]))
                for m in _require(obj, "mentions", line)
            ],
        )
    except KeyError as exc:
        raise SchemaError(f"line {line}: missing field {exc.args[0]!r}") from exc
    except SchemaError as exc:
        raise SchemaError(f"line {line}: {exc}") from exc

    labels = None
    if obj.get("chains") is not None:
        boxes_raw = obj.get("mention_boxes")
        if boxes_raw is None:
            boxes = [None] * len(narration.mentions)
        else:
            if len(boxes_raw) != len(narration.mentions):
                raise SchemaError(
                    f"line {line}: field 'mention_boxes' has {len(boxes_raw)} entries "
                    f"for {len(narration.mentions)} mentions"
                )
            boxes = []
            for i, b in enumerate(boxes_raw):
                if b is None:
                    boxes.append(None)
                else:
                    arr = np.asarray(b, dtype=np.float64)
                    check_box(arr, f"mention_boxes[{i}]")
                    boxes.append(arr)
        labels = SampleLabels(chains=[[int(m) for m in c] for c in obj["chains"]], mention_boxes=boxes)
        try:
            Partition.from_chains(labels.chains, len(narration.mentions))
        except SchemaError as exc:
            raise SchemaError(f"line {line}: {exc}") from exc
    return Sample(id=sample_id, regions=regions, narration=narration, labels=labels)


def sample_to_json(sample: Sample) -> dict:
    obj: dict = {
        "id": sample.id,
        "regions": [
            {
                "box": [float(v) for v in box],
                "class_id": int(cid),
                "feat": [float(v) for v in feat],
            }
            for feat, box, cid in zip(
                sample.regions.features, sample.regions.boxes, sample.regions.class_ids
            )
        ],
        "tokens": list(sample.narration.token_ids),
        "mentions": [
            {"start": m.start, "end": m.end, "kind": m.kind} for m in sample.narration.mentions
        ],
    }
    if sample.labels is not None:
        obj["chains"] = [list(c) for c in sample.labels.chains]
        obj["mention_boxes"] = [
            None if b is None else [float(v) for v in b] for b in sample.labels.mention_boxes
        ]
    return obj


def load_jsonl(path) -> list[Sample]:
    """Read one sample per line, validating the schema as it goes."""
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            samples.append(sample_from_json(obj, line=lineno))
    return samples


def write_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_json(sample)) + "\n")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocab:
    """Token table with the reserved [PAD]/[MASK]/[UNK] ids up front."""

    token_to_id: dict[str, int]
    noun_class_map: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = list(self.token_to_id.values())
        if len(set(ids)) != len(ids):
            raise SchemaError("vocab: duplicate ids")
        for name, want in (("[PAD]", PAD_ID), ("[MASK]", MASK_ID), ("[UNK]", UNK_ID)):
            if self.token_to_id.get(name) != want:
                raise SchemaError(f"vocab: reserved token {name} must have id {want}")

    @property
    def size(self) -> int:
        return max(self.token_to_id.values()) + 1

    def __len__(self) -> int:
        return self.size


def mask_tokens(token_ids, prob: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Independently replace non-reserved tokens by [MASK] with probability ``prob``."""
    if not 0.0 <= prob <= 1.0:
        raise SchemaError(f"mask probability {prob} outside [0, 1]")
    masked = list(token_ids)
    positions = []
    for i, tok in enumerate(token_ids):
        if tok < N_RESERVED:
            continue
        if rng.random() < prob:
            masked[i] = MASK_ID
            positions.append(i)
    return masked, positions


# ---------------------------------------------------------------------------
# labeled / unlabeled splitting
# ---------------------------------------------------------------------------


def split(dataset: list[Sample], labeled_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Disjoint, exhaustive split; the unlabeled side has labels stripped."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise SchemaError(f"labeled_fraction {labeled_fraction} outside (0, 1]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_labeled = min(len(dataset), max(1, round(labeled_fraction * len(dataset))))
    labeled_idx = set(order[:n_labeled].tolist())
    labeled = [dataset[i] for i in sorted(labeled_idx)]
    unlabeled = [dataset[i].without_labels() for i in range(len(dataset)) if i not in labeled_idx]
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Knobs for the stand-in corpus.

    Region features are [entity prototype | box coords | class one-hot], so
    d_region = proto_dim + 4 + n_classes (16 with the defaults). Narrations
    describe entities left to right; pronouns always follow a mention of the
    same entity, which is what makes them resolvable from context.
    """

    n_samples: int = 100
    n_entities_range: tuple[int, int] = (2, 4)
    n_regions_range: tuple[int, int] = (3, 6)
    mentions_per_entity_range: tuple[int, int] = (1, 3)
    pronoun_rate: float = 0.3
    feature_noise_sigma: float = 0.05
    distractor_region_rate: float = 0.25
    duplicate_class_rate: float = 0.0
    n_classes: int = 6
    proto_dim: int = 6
    n_fillers: int = 6
    n_pronouns: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("n_entities_range", "n_regions_range", "mentions_per_entity_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise SchemaError(f"synthetic config: bad range {name}={lo, hi}")
        for name in ("pronoun_rate", "distractor_region_rate", "duplicate_class_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SchemaError(f"synthetic config: {name}={v} outside [0, 1]")
        if self.n_entities_range[1] > self.n_classes:
            raise SchemaError("synthetic config: more entities per image than classes")

    @property
    def d_region(self) -> int:
        return self.proto_dim + 4 + self.n_classes


def synthetic_vocab(cfg: SyntheticConfig) -> Vocab:
    tokens = {"[PAD]": PAD_ID, "[MASK]": MASK_ID, "[UNK]": UNK_ID}
    next_id = N_RESERVED
    for i in range(cfg.n_fillers):
        tokens[f"filler{i}"] = next_id
        next_id += 1
    for i in range(cfg.n_pronouns):
        tokens[f"pron{i}"] = next_id
        next_id += 1
    tokens["the"] = next_id
    next_id += 1
    noun_class_map = {}
    for c in range(cfg.n_classes):
        tokens[f"noun{c}"] = next_id
        noun_class_map[next_id] = c
        next_id += 1
    return Vocab(tokens, noun_class_map)


def _entity_boxes(k: int, rng: np.random.Generator) -> np.ndarray:
    """k horizontally separated boxes, left to right, inside the unit image."""
    boxes = np.zeros((k, 4))
    slot = 1.0 / k
    for i in range(k):
        w = rng.uniform(0.5, 0.85) * slot
        h = rng.uniform(0.25, 0.6)
        x = i * slot + rng.uniform(0.0, slot - w)
        y = rng.uniform(0.0, 1.0 - h)
        boxes[i] = (x, y, w, h)
    return boxes


def _region_feature(proto, box, class_id, cfg, rng) -> np.ndarray:
    noise = rng.normal(0.0, cfg.feature_noise_sigma, cfg.proto_dim) if cfg.feature_noise_sigma > 0 else 0.0
    onehot = np.zeros(cfg.n_classes)
    onehot[class_id] = 1.0
    return np.concatenate([proto + noise, np.asarray(box, dtype=float), onehot])


def synth_generate(cfg: SyntheticConfig) -> list[Sample]:
    """Deterministic synthetic corpus.

    The seed space is partitioned per sample (SeedSequence.spawn), so samples
    could be generated in parallel and still match the sequential output
    bit for bit.
    """
    vocab = synthetic_vocab(cfg)
    noun_ids = {c: tid for tid, c in vocab.noun_class_map.items()}
    pron_ids = [vocab.token_to_id[f"pron{i}"] for i in range(cfg.n_pronouns)]
    filler_ids = [vocab.token_to_id[f"filler{i}"] for i in range(cfg.n_fillers)]
    det_id = vocab.token_to_id["the"]

    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_samples)
    samples = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        k = int(rng.integers(cfg.n_entities_range[0], cfg.n_entities_range[1] + 1))

        classes = list(rng.choice(cfg.n_classes, size=k, replace=False))
        for i in range(1, k):
            if rng.random() < cfg.duplicate_class_rate:
                classes[i] = classes[int(rng.integers(0, i))]
        protos = rng.normal(0.0, 1.0, size=(k, cfg.proto_dim))
        boxes = _entity_boxes(k, rng)

        total_regions = int(rng.integers(cfg.n_regions_range[0], cfg.n_regions_range[1] + 1))
        total_regions = max(total_regions, k)
        feats, rboxes, rclasses = [], [], []
        for e in range(k):
            feats.append(_region_feature(protos[e], boxes[e], classes[e], cfg, rng))
            rboxes.append(boxes[e])
            rclasses.append(classes[e])
        for _ in range(total_regions - k):
            if rng.random() < cfg.distractor_region_rate:
                box = np.concatenate([rng.uniform(0.0, 0.7, 2), rng.uniform(0.1, 0.3, 2)])
                feats.append(
                    _region_feature(
                        rng.normal(0.0, 1.0, cfg.proto_dim), box, int(rng.integers(cfg.n_classes)), cfg, rng
                    )
                )
                rboxes.append(box)
                rclasses.append(int(rng.integers(cfg.n_classes)))
            else:
                e = int(rng.integers(k))  # an extra detector proposal for an entity
                feats.append(_region_feature(protos[e], boxes[e], classes[e], cfg, rng))
                rboxes.append(boxes[e])
                rclasses.append(classes[e])
        regions = RegionSet(np.array(feats), np.array(rboxes), rclasses)

        # narration walks entities left to right; each entity block opens with
        # a noun phrase, pronouns only ever follow a mention of their entity,
        # immediately (no filler), the way a narration trails its antecedent
        tokens: list[int] = []
        mentions: list[MentionSpan] = []
        mention_entities: list[int] = []
        for e in range(k):
            n_mentions = int(
                rng.integers(cfg.mentions_per_entity_range[0], cfg.mentions_per_entity_range[1] + 1)
            )
            for j in range(n_mentions):
                pronoun = j > 0 and rng.random() < cfg.pronoun_rate
                if tokens and not pronoun:
                    tokens.append(int(rng.choice(filler_ids)))
                if pronoun:
                    start = len(tokens)
                    tokens.append(int(rng.choice(pron_ids)))
                    mentions.append(MentionSpan(start, start + 1, PRON_KIND))
                else:
                    start = len(tokens)
                    tokens.extend([det_id, noun_ids[classes[e]]])
                    mentions.append(MentionSpan(start, start + 2, NP_KIND))
                mention_entities.append(e)
            tokens.append(int(rng.choice(filler_ids)))

        chains: list[list[int]] = []
        for e in range(k):
            members = [m for m, ent in enumerate(mention_entities) if ent == e]
            if len(members) > 1:
                chains.append(members)
        mention_boxes = [boxes[e].copy() for e in mention_entities]

        samples.append(
            Sample(
                id=f"synth-{index:05d}",
                regions=regions,
                narration=NarrationTokens(tokens, mentions),
                labels=SampleLabels(chains=chains, mention_boxes=mention_boxes),
            )
        )
    return samples
